//! Grid-cell foreground module.
//!
//! An image is divided into `grid x grid` cells, each modeling at most one
//! nearby object through per-cell latents: presence, box (scale + shift),
//! depth, and appearance. Parallel mode infers every cell simultaneously
//! from a convolutional encoder (mean-field); sequential mode traverses
//! cells in row-major order, conditioning each cell's heads on the previous
//! cell's sampled latents, and exists for the latency benchmark.

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image_ops::{st_extract, st_place};
use crate::model::ModelConfig;
use crate::nn::{Bound, Conv2dLayer, GroupNorm, Linear, ParamStore};
use crate::objective::{bernoulli_kl_from_logits, gaussian_kl_elem};
use crate::rngutil::normal_array;
use crate::scalar::{sc, Scalar};
use crate::tensor::{require, Conv2dSpec, Tape, Var};

/// Foreground inference mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FgMode {
    Parallel,
    Sequential,
}

impl std::str::FromStr for FgMode {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(FgMode::Parallel),
            "sequential" => Ok(FgMode::Sequential),
            other => Err(crate::Error::InvalidArgument(format!("unknown mode {other}"))),
        }
    }
}

impl std::fmt::Display for FgMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FgMode::Parallel => "parallel",
            FgMode::Sequential => "sequential",
        })
    }
}

/// Per-cell posterior parameters. Shapes are `[B, G]` for scalars,
/// `[B, G, d]` for vector latents, with `G = grid * grid` cells in row-major
/// order. The appearance posterior is filled in once glimpses are encoded.
pub struct FgPosterior {
    pub pres_logit: Var,
    pub pres_prob: Var,
    pub depth_mu: Var,
    pub depth_sigma: Var,
    pub scale_mu: Var,
    pub scale_sigma: Var,
    pub shift_mu: Var,
    pub shift_sigma: Var,
    pub what_mu: Option<Var>,
    pub what_sigma: Option<Var>,
}

/// Reparameterized samples for all cells; `boxes` is the derived `[B*G, 4]`
/// box tensor (sigmoid scale, rescaled shift).
pub struct FgSample {
    pub z_pres: Var,
    pub z_depth: Var,
    pub z_scale_raw: Var,
    pub z_shift_raw: Var,
    pub z_what: Var,
    pub boxes: Var,
}

/// Composited foreground: mean image, mask, and the per-cell canvas-size
/// masks and appearances retained for the boundary loss and visualization.
pub struct FgRender {
    pub mu_fg: Var,
    pub alpha: Var,
    pub placed_masks: Var,
    pub placed_apps: Var,
    pub weights: Var,
}

/// Prior hyperparameters for the cell latents; shift/depth/appearance priors
/// are standard normal.
#[derive(Clone, Copy, Debug)]
pub struct FgPrior {
    pub pres_prob: f64,
    pub scale_mean: f64,
    pub scale_std: f64,
}

/// Fixed reparameterization noise for one forward pass. Drawing it up front
/// keeps inference a pure function of (parameters, image, noise), which the
/// gradient checks and determinism tests rely on.
pub struct FgNoise<S: Scalar> {
    pub pres_logistic: ArrayD<S>,
    pub depth: ArrayD<S>,
    pub scale: ArrayD<S>,
    pub shift: ArrayD<S>,
    pub what: ArrayD<S>,
}

impl<S: Scalar> FgNoise<S> {
    pub fn draw(rng: &mut ChaCha8Rng, batch: usize, cells: usize, what_dim: usize) -> Self {
        use rand::Rng;
        let pres_logistic = ArrayD::from_shape_simple_fn(IxDyn(&[batch, cells]), || {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            sc::<S>(u.ln() - (1.0 - u).ln())
        });
        FgNoise {
            pres_logistic,
            depth: normal_array(rng, &[batch, cells]),
            scale: normal_array(rng, &[batch, cells, 2]),
            shift: normal_array(rng, &[batch, cells, 2]),
            what: normal_array(rng, &[batch * cells, what_dim]),
        }
    }
}

struct ConvGn {
    conv: Conv2dLayer,
    gn: Option<GroupNorm>,
}

impl ConvGn {
    fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        spec: Conv2dSpec,
        norm: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        ConvGn {
            conv: Conv2dLayer::new(ps, name, in_ch, out_ch, kernel, spec, rng),
            gn: norm.then(|| GroupNorm::new(ps, &format!("{name}.gn"), out_ch, norm_groups(out_ch))),
        }
    }

    fn forward<S: Scalar>(&self, t: &mut Tape<S>, p: &Bound, x: Var) -> Var {
        let mut y = self.conv.forward(t, p, x);
        if let Some(gn) = &self.gn {
            y = gn.forward(t, p, y);
        }
        t.elu(y)
    }
}

pub(crate) fn norm_groups(channels: usize) -> usize {
    for g in [8, 4, 2] {
        if channels % g == 0 && channels >= 2 * g {
            return g;
        }
    }
    1
}

/// Heads in sequential mode are linear layers over the concatenated cell
/// feature and previous-cell projection; in parallel mode they are 1x1
/// convolutions over the full feature map.
enum Heads {
    Parallel {
        pres: Conv2dLayer,
        depth: Conv2dLayer,
        scale: Conv2dLayer,
        shift: Conv2dLayer,
    },
    Sequential {
        pres: Linear,
        depth: Linear,
        scale: Linear,
        shift: Linear,
        prev_proj: Linear,
    },
}

pub struct FgNet {
    enc: Vec<ConvGn>,
    extra: Vec<ConvGn>,
    enc_out: Conv2dLayer,
    res_conn: Vec<ConvGn>,
    res_enc: Option<ConvGn>,
    heads: Heads,
    glimpse_enc: Vec<ConvGn>,
    glimpse_enc_out: Linear,
    glimpse_dec_in: Conv2dLayer,
    glimpse_dec: Vec<(crate::nn::ConvSub, GroupNorm)>,
    glimpse_dec_out: Conv2dLayer,
    cfg: FgDims,
}

/// The handful of config values the net needs at forward time.
#[derive(Clone, Copy)]
struct FgDims {
    image_size: usize,
    channels: usize,
    grid: usize,
    glimpse: usize,
    what_dim: usize,
    feat_ch: usize,
}

impl FgNet {
    pub fn new<S: Scalar>(ps: &mut ParamStore<S>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let n_down = (cfg.image_size / cfg.grid).trailing_zeros() as usize;
        let mut enc = Vec::new();
        let mut ch = cfg.channels;
        let mut out = cfg.fg_base_ch;
        for i in 0..n_down {
            enc.push(ConvGn::new(
                ps,
                &format!("fg.enc{i}"),
                ch,
                out,
                4,
                Conv2dSpec::new(2, 1),
                cfg.fg_norm,
                rng,
            ));
            ch = out;
            out = (out * 2).min(cfg.fg_feat_ch);
        }
        let mut extra = Vec::new();
        if cfg.fg_extra_convs {
            for i in 0..2 {
                extra.push(ConvGn::new(
                    ps,
                    &format!("fg.mid{i}"),
                    ch,
                    cfg.fg_feat_ch,
                    3,
                    Conv2dSpec::new(1, 1),
                    cfg.fg_norm,
                    rng,
                ));
                ch = cfg.fg_feat_ch;
            }
        }
        let feat = cfg.fg_feat_ch;
        let enc_out = Conv2dLayer::new(ps, "fg.enc_out", ch, feat, 1, Conv2dSpec::new(1, 0), rng);

        let mut res_conn = Vec::new();
        let mut res_enc = None;
        if cfg.fg_residual {
            for i in 0..2 {
                res_conn.push(ConvGn::new(
                    ps,
                    &format!("fg.res{i}"),
                    feat,
                    feat,
                    3,
                    Conv2dSpec::new(1, 1),
                    cfg.fg_norm,
                    rng,
                ));
            }
            res_enc = Some(ConvGn::new(
                ps,
                "fg.res_enc",
                2 * feat,
                feat,
                3,
                Conv2dSpec::new(1, 1),
                cfg.fg_norm,
                rng,
            ));
        }

        let latent_dim = 6 + cfg.what_dim; // pres + depth + scale(2) + shift(2) + what
        let heads = match cfg.mode {
            FgMode::Parallel => Heads::Parallel {
                pres: Conv2dLayer::new(ps, "fg.head_pres", feat, 1, 1, Conv2dSpec::new(1, 0), rng),
                depth: Conv2dLayer::new(ps, "fg.head_depth", feat, 2, 1, Conv2dSpec::new(1, 0), rng),
                scale: Conv2dLayer::new(ps, "fg.head_scale", feat, 4, 1, Conv2dSpec::new(1, 0), rng),
                shift: Conv2dLayer::new(ps, "fg.head_shift", feat, 4, 1, Conv2dSpec::new(1, 0), rng),
            },
            FgMode::Sequential => {
                let in_dim = feat + cfg.seq_proj_dim;
                Heads::Sequential {
                    pres: Linear::new(ps, "fg.head_pres", in_dim, 1, rng),
                    depth: Linear::new(ps, "fg.head_depth", in_dim, 2, rng),
                    scale: Linear::new(ps, "fg.head_scale", in_dim, 4, rng),
                    shift: Linear::new(ps, "fg.head_shift", in_dim, 4, rng),
                    prev_proj: Linear::new(ps, "fg.prev_proj", latent_dim, cfg.seq_proj_dim, rng),
                }
            }
        };

        // glimpse encoder: stride-2 chain down to 4x4, then a linear head
        let mut glimpse_enc = Vec::new();
        let mut gch = cfg.channels;
        let mut gout = cfg.glimpse_base_ch;
        let mut gs = cfg.glimpse_size;
        let mut gi = 0;
        while gs > 4 {
            glimpse_enc.push(ConvGn::new(
                ps,
                &format!("fg.genc{gi}"),
                gch,
                gout,
                4,
                Conv2dSpec::new(2, 1),
                cfg.fg_norm,
                rng,
            ));
            gch = gout;
            gout = (gout * 2).min(cfg.fg_feat_ch);
            gs /= 2;
            gi += 1;
        }
        let glimpse_enc_out =
            Linear::new(ps, "fg.genc_out", gch * gs * gs, 2 * cfg.what_dim, rng);

        // glimpse decoder: 1x1 conv at 1x1 spatial, then sub-pixel doubling
        let n_up = cfg.glimpse_size.trailing_zeros() as usize;
        let mut dch = cfg.glimpse_dec_ch;
        let glimpse_dec_in =
            Conv2dLayer::new(ps, "fg.gdec_in", cfg.what_dim, dch, 1, Conv2dSpec::new(1, 0), rng);
        let mut glimpse_dec = Vec::new();
        for i in 0..n_up {
            let next = (dch / 2).max(16);
            glimpse_dec.push((
                crate::nn::ConvSub::new(ps, &format!("fg.gdec{i}"), dch, next, 2, rng),
                GroupNorm::new(ps, &format!("fg.gdec{i}.gn"), next, norm_groups(next)),
            ));
            dch = next;
        }
        let glimpse_dec_out = Conv2dLayer::new(
            ps,
            "fg.gdec_out",
            dch,
            cfg.channels + 1,
            3,
            Conv2dSpec::new(1, 1),
            rng,
        );

        FgNet {
            enc,
            extra,
            enc_out,
            res_conn,
            res_enc,
            heads,
            glimpse_enc,
            glimpse_enc_out,
            glimpse_dec_in,
            glimpse_dec,
            glimpse_dec_out,
            cfg: FgDims {
                image_size: cfg.image_size,
                channels: cfg.channels,
                grid: cfg.grid,
                glimpse: cfg.glimpse_size,
                what_dim: cfg.what_dim,
                feat_ch: cfg.fg_feat_ch,
            },
        }
    }

    /// Convolutional trunk: image -> `[B, F, grid, grid]` cell features.
    fn trunk<S: Scalar>(&self, t: &mut Tape<S>, p: &Bound, image: Var) -> Var {
        let mut h = image;
        for layer in &self.enc {
            h = layer.forward(t, p, h);
        }
        for layer in &self.extra {
            h = layer.forward(t, p, h);
        }
        let mut e = self.enc_out.forward(t, p, h);
        e = t.elu(e);
        if let Some(res_enc) = &self.res_enc {
            let mut r = e;
            for layer in &self.res_conn {
                r = layer.forward(t, p, r);
            }
            let cat = t.concat(&[e, r], 1);
            e = res_enc.forward(t, p, cat);
        }
        e
    }

    /// Parallel per-cell posterior parameters from the shared encoder.
    ///
    /// No cell's output depends on another cell's sampled latents; the heads
    /// are 1x1 convolutions applied to every cell simultaneously.
    pub fn encode_foreground<S: Scalar>(
        &self,
        t: &mut Tape<S>,
        p: &Bound,
        image: Var,
    ) -> Result<FgPosterior> {
        let shape = t.shape(image).to_vec();
        require(
            shape.len() == 4 && shape[2] == shape[3],
            format!("image must be [B,C,S,S], got {shape:?}"),
        )?;
        require(
            shape[2] % self.cfg.grid == 0,
            format!("image size {} not divisible by grid {}", shape[2], self.cfg.grid),
        )?;
        let Heads::Parallel { pres, depth, scale, shift } = &self.heads else {
            return Err(crate::Error::InvalidArgument(
                "encode_foreground requires a parallel-mode model".into(),
            ));
        };
        let e = self.trunk(t, p, image);
        let b = shape[0];
        let g = self.cfg.grid * self.cfg.grid;

        let to_cells = |t: &mut Tape<S>, m: Var, ch: usize| -> Var {
            // [B, ch, gh, gw] -> [B, G, ch]
            let r = t.reshape(m, &[b, ch, g]);
            t.permute(r, &[0, 2, 1])
        };

        let pres_map = pres.forward(t, p, e);
        let pres_logit = {
            let c = to_cells(t, pres_map, 1);
            t.reshape(c, &[b, g])
        };
        let pres_prob = t.sigmoid(pres_logit);

        let depth_map = depth.forward(t, p, e);
        let dc = to_cells(t, depth_map, 2);
        let depth_mu = {
            let m = t.slice_axis(dc, 2, 0, 1);
            t.reshape(m, &[b, g])
        };
        let depth_sigma = {
            let s = t.slice_axis(dc, 2, 1, 1);
            let s = t.reshape(s, &[b, g]);
            t.softplus(s)
        };

        let scale_map = scale.forward(t, p, e);
        let sc2 = to_cells(t, scale_map, 4);
        let scale_mu = t.slice_axis(sc2, 2, 0, 2);
        let scale_sigma = {
            let s = t.slice_axis(sc2, 2, 2, 2);
            t.softplus(s)
        };

        let shift_map = shift.forward(t, p, e);
        let sh2 = to_cells(t, shift_map, 4);
        let shift_mu = t.slice_axis(sh2, 2, 0, 2);
        let shift_sigma = {
            let s = t.slice_axis(sh2, 2, 2, 2);
            t.softplus(s)
        };

        Ok(FgPosterior {
            pres_logit,
            pres_prob,
            depth_mu,
            depth_sigma,
            scale_mu,
            scale_sigma,
            shift_mu,
            shift_sigma,
            what_mu: None,
            what_sigma: None,
        })
    }

    /// Appearance posterior from glimpses `[M, C, gs, gs]`.
    pub fn encode_glimpse<S: Scalar>(
        &self,
        t: &mut Tape<S>,
        p: &Bound,
        glimpse: Var,
    ) -> Result<(Var, Var)> {
        let shape = t.shape(glimpse).to_vec();
        require(
            shape.len() == 4 && shape[2] == self.cfg.glimpse && shape[3] == self.cfg.glimpse,
            format!("glimpse must be [M,C,{0},{0}], got {shape:?}", self.cfg.glimpse),
        )?;
        let mut h = glimpse;
        for layer in &self.glimpse_enc {
            h = layer.forward(t, p, h);
        }
        let hs = t.shape(h).to_vec();
        let flat = t.reshape(h, &[hs[0], hs[1] * hs[2] * hs[3]]);
        let out = self.glimpse_enc_out.forward(t, p, flat);
        let mu = t.slice_axis(out, 1, 0, self.cfg.what_dim);
        let sigma_raw = t.slice_axis(out, 1, self.cfg.what_dim, self.cfg.what_dim);
        let sigma = t.softplus(sigma_raw);
        Ok((mu, sigma))
    }

    /// Decode appearance latents into glimpse-size appearance and mask, both
    /// sigmoid-bounded: `[M, D] -> ([M, C, gs, gs], [M, 1, gs, gs])`.
    pub fn decode_glimpse<S: Scalar>(
        &self,
        t: &mut Tape<S>,
        p: &Bound,
        z_what: Var,
    ) -> Result<(Var, Var)> {
        let shape = t.shape(z_what).to_vec();
        require(
            shape.len() == 2 && shape[1] == self.cfg.what_dim,
            format!("z_what must be [M,{}], got {shape:?}", self.cfg.what_dim),
        )?;
        let m = shape[0];
        let z = t.reshape(z_what, &[m, self.cfg.what_dim, 1, 1]);
        let mut h = self.glimpse_dec_in.forward(t, p, z);
        h = t.elu(h);
        for (up, gn) in &self.glimpse_dec {
            h = up.forward(t, p, h);
            h = gn.forward(t, p, h);
            h = t.elu(h);
        }
        let out = self.glimpse_dec_out.forward(t, p, h);
        let o_raw = t.slice_axis(out, 1, 0, self.cfg.channels);
        let a_raw = t.slice_axis(out, 1, self.cfg.channels, 1);
        Ok((t.sigmoid(o_raw), t.sigmoid(a_raw)))
    }
}

/// Map a raw shift latent to a normalized shift in (-1, 1) for cell `i` of
/// an `h x w` grid: cell center plus a tanh-bounded local offset, rescaled
/// into canvas coordinates.
pub fn rescale_shift(z_shift_raw: [f64; 2], i: usize, h: usize, w: usize) -> Result<(f64, f64)> {
    require(i < h * w, format!("cell index {i} out of range for {h}x{w} grid"))?;
    let col = (i % w) as f64;
    let row = (i / w) as f64;
    let zx = col + 0.5 + z_shift_raw[0].tanh();
    let zy = row + 0.5 + z_shift_raw[1].tanh();
    Ok((2.0 * zx / w as f64 - 1.0, 2.0 * zy / h as f64 - 1.0))
}

/// Batched tape version of [`rescale_shift`]: `[B, G, 2] -> [B, G, 2]`.
pub fn rescale_shift_batch<S: Scalar>(t: &mut Tape<S>, z_shift_raw: Var, grid: usize) -> Var {
    let g = grid * grid;
    let mut centers = ArrayD::<S>::zeros(IxDyn(&[1, g, 2]));
    for i in 0..g {
        centers[[0, i, 0]] = sc::<S>((i % grid) as f64 + 0.5);
        centers[[0, i, 1]] = sc::<S>((i / grid) as f64 + 0.5);
    }
    let c = t.constant(centers);
    let local = t.tanh(z_shift_raw);
    let global = t.add(local, c);
    let scaled = t.scale(global, 2.0 / grid as f64);
    t.add_scalar(scaled, -1.0)
}

/// Derive `[B*G, 4]` boxes from raw scale/shift samples.
fn derive_boxes<S: Scalar>(t: &mut Tape<S>, z_scale_raw: Var, z_shift_raw: Var, grid: usize) -> Var {
    let shape = t.shape(z_scale_raw).to_vec();
    let (b, g) = (shape[0], shape[1]);
    let scale = t.sigmoid(z_scale_raw);
    let shift = rescale_shift_batch(t, z_shift_raw, grid);
    let cat = t.concat(&[scale, shift], 2);
    t.reshape(cat, &[b * g, 4])
}

/// Depth-weighted composition of placed per-cell masks and appearances.
///
/// Weights are a pixel-wise softmax over cells of `-100 * sigmoid(z_depth) *
/// placed_mask`, so nearer (smaller depth) cells dominate where masks
/// overlap.
pub fn composite_foreground<S: Scalar>(
    t: &mut Tape<S>,
    placed_masks: Var,
    placed_apps: Var,
    z_depth: Var,
) -> FgRender {
    let shape = t.shape(placed_masks).to_vec();
    let (b, g) = (shape[0], shape[1]);
    let d = t.sigmoid(z_depth);
    let d = t.reshape(d, &[b, g, 1, 1, 1]);
    let dm = t.mul(d, placed_masks);
    let logits = t.scale(dm, -100.0);
    let weights = t.softmax_axis(logits, 1);
    let wm = t.mul(weights, placed_masks);
    let alpha = t.sum_axis(wm, 1);
    let wa = t.mul(weights, placed_apps);
    let mu_fg = t.sum_axis(wa, 1);
    FgRender { mu_fg, alpha, placed_masks, placed_apps, weights }
}

/// Foreground KL term per image: Bernoulli KL on presence plus the relaxed
/// presence sample gating the Gaussian KLs of the remaining latents.
pub fn foreground_kl<S: Scalar>(
    t: &mut Tape<S>,
    posterior: &FgPosterior,
    prior: &FgPrior,
    sample: &FgSample,
) -> Result<Var> {
    let shape = t.shape(posterior.pres_logit).to_vec();
    let (b, g) = (shape[0], shape[1]);
    let kl_pres = bernoulli_kl_from_logits(t, posterior.pres_logit, prior.pres_prob)?;

    let unit_mu = t.constant(ArrayD::zeros(IxDyn(&[1, 1])));
    let unit_sigma = t.constant(ArrayD::from_elem(IxDyn(&[1, 1]), S::one()));
    let kl_depth =
        gaussian_kl_elem(t, posterior.depth_mu, posterior.depth_sigma, unit_mu, unit_sigma);

    let sc_mu = t.constant(ArrayD::from_elem(IxDyn(&[1, 1, 1]), sc::<S>(prior.scale_mean)));
    let sc_sigma = t.constant(ArrayD::from_elem(IxDyn(&[1, 1, 1]), sc::<S>(prior.scale_std)));
    let kl_scale_e = gaussian_kl_elem(t, posterior.scale_mu, posterior.scale_sigma, sc_mu, sc_sigma);
    let kl_scale = t.sum_axis(kl_scale_e, 2);

    let unit_mu3 = t.constant(ArrayD::zeros(IxDyn(&[1, 1, 1])));
    let unit_sigma3 = t.constant(ArrayD::from_elem(IxDyn(&[1, 1, 1]), S::one()));
    let kl_shift_e =
        gaussian_kl_elem(t, posterior.shift_mu, posterior.shift_sigma, unit_mu3, unit_sigma3);
    let kl_shift = t.sum_axis(kl_shift_e, 2);

    let what_mu = posterior.what_mu.expect("appearance posterior present");
    let what_sigma = posterior.what_sigma.expect("appearance posterior present");
    let unit_mu2 = t.constant(ArrayD::zeros(IxDyn(&[1, 1])));
    let unit_sigma2 = t.constant(ArrayD::from_elem(IxDyn(&[1, 1]), S::one()));
    let kl_what_e = gaussian_kl_elem(t, what_mu, what_sigma, unit_mu2, unit_sigma2);
    let kl_what_m = t.sum_axis(kl_what_e, 1); // [B*G]
    let kl_what = t.reshape(kl_what_m, &[b, g]);

    let s1 = t.add(kl_depth, kl_scale);
    let s2 = t.add(s1, kl_shift);
    let gaussians = t.add(s2, kl_what);
    let gated = t.mul(sample.z_pres, gaussians);
    let cell_total = t.add(kl_pres, gated);
    let flat = t.reshape(cell_total, &[b, g]);
    Ok(t.sum_axis(flat, 1))
}

/// Full foreground inference: encode, sample, attend, decode, composite.
#[allow(clippy::too_many_arguments)]
pub fn infer_foreground<S: Scalar>(
    net: &FgNet,
    t: &mut Tape<S>,
    p: &Bound,
    image: Var,
    noise: &FgNoise<S>,
    mode: FgMode,
    tau: f64,
) -> Result<(FgPosterior, FgSample, FgRender)> {
    require(tau > 0.0, "temperature must be positive")?;
    match mode {
        FgMode::Parallel => infer_parallel(net, t, p, image, noise, tau),
        FgMode::Sequential => infer_sequential(net, t, p, image, noise, tau),
    }
}

fn reparam<S: Scalar>(t: &mut Tape<S>, mu: Var, sigma: Var, eps: &ArrayD<S>) -> Var {
    let e = t.constant(eps.clone());
    let se = t.mul(sigma, e);
    t.add(mu, se)
}

fn relaxed_pres<S: Scalar>(t: &mut Tape<S>, logit: Var, eps: &ArrayD<S>, tau: f64) -> Var {
    let e = t.constant(eps.clone());
    let shifted = t.add(logit, e);
    let scaled = t.scale(shifted, 1.0 / tau);
    t.sigmoid(scaled)
}

fn infer_parallel<S: Scalar>(
    net: &FgNet,
    t: &mut Tape<S>,
    p: &Bound,
    image: Var,
    noise: &FgNoise<S>,
    tau: f64,
) -> Result<(FgPosterior, FgSample, FgRender)> {
    let mut post = net.encode_foreground(t, p, image)?;
    let shape = t.shape(image).to_vec();
    let (b, g) = (shape[0], net.cfg.grid * net.cfg.grid);
    let gs = net.cfg.glimpse;

    let z_pres = relaxed_pres(t, post.pres_logit, &noise.pres_logistic, tau);
    let z_depth = reparam(t, post.depth_mu, post.depth_sigma, &noise.depth);
    let z_scale_raw = reparam(t, post.scale_mu, post.scale_sigma, &noise.scale);
    let z_shift_raw = reparam(t, post.shift_mu, post.shift_sigma, &noise.shift);
    let boxes = derive_boxes(t, z_scale_raw, z_shift_raw, net.cfg.grid);

    let glimpses = st_extract(t, image, boxes, gs, g)?;
    let (what_mu, what_sigma) = net.encode_glimpse(t, p, glimpses)?;
    let z_what = reparam(t, what_mu, what_sigma, &noise.what);
    post.what_mu = Some(what_mu);
    post.what_sigma = Some(what_sigma);

    let (o_att, alpha_att) = net.decode_glimpse(t, p, z_what)?;
    let zp = t.reshape(z_pres, &[b * g, 1, 1, 1]);
    let gated_mask = t.mul(alpha_att, zp);
    let y_att = t.mul(gated_mask, o_att);

    let placed_mask = st_place(t, gated_mask, boxes, net.cfg.image_size, net.cfg.image_size)?;
    let placed_app = st_place(t, y_att, boxes, net.cfg.image_size, net.cfg.image_size)?;
    let pm = t.reshape(placed_mask, &[b, g, 1, net.cfg.image_size, net.cfg.image_size]);
    let pa = t.reshape(
        placed_app,
        &[b, g, net.cfg.channels, net.cfg.image_size, net.cfg.image_size],
    );

    let render = composite_foreground(t, pm, pa, z_depth);
    let sample = FgSample { z_pres, z_depth, z_scale_raw, z_shift_raw, z_what, boxes };
    Ok((post, sample, render))
}

fn infer_sequential<S: Scalar>(
    net: &FgNet,
    t: &mut Tape<S>,
    p: &Bound,
    image: Var,
    noise: &FgNoise<S>,
    tau: f64,
) -> Result<(FgPosterior, FgSample, FgRender)> {
    let Heads::Sequential { pres, depth, scale, shift, prev_proj } = &net.heads else {
        return Err(crate::Error::InvalidArgument(
            "sequential inference requires a sequential-mode model".into(),
        ));
    };
    let shape = t.shape(image).to_vec();
    let b = shape[0];
    let grid = net.cfg.grid;
    let g = grid * grid;
    let gs = net.cfg.glimpse;
    let latent_dim = 6 + net.cfg.what_dim;

    let e = net.trunk(t, p, image);

    let mut prev = t.constant(ArrayD::zeros(IxDyn(&[b, latent_dim])));
    let mut pres_logits = Vec::with_capacity(g);
    let mut pres_samples = Vec::with_capacity(g);
    let mut depth_mus = Vec::with_capacity(g);
    let mut depth_sigmas = Vec::with_capacity(g);
    let mut depth_samples = Vec::with_capacity(g);
    let mut scale_mus = Vec::with_capacity(g);
    let mut scale_sigmas = Vec::with_capacity(g);
    let mut scale_samples = Vec::with_capacity(g);
    let mut shift_mus = Vec::with_capacity(g);
    let mut shift_sigmas = Vec::with_capacity(g);
    let mut shift_samples = Vec::with_capacity(g);
    let mut what_mus = Vec::with_capacity(g);
    let mut what_sigmas = Vec::with_capacity(g);
    let mut what_samples = Vec::with_capacity(g);
    let mut cell_boxes = Vec::with_capacity(g);
    let mut placed_masks = Vec::with_capacity(g);
    let mut placed_apps = Vec::with_capacity(g);

    for i in 0..g {
        let (row, col) = (i / grid, i % grid);
        // cell feature column [B, F]
        let fr = t.slice_axis(e, 2, row, 1);
        let fc = t.slice_axis(fr, 3, col, 1);
        let feat = t.reshape(fc, &[b, net.cfg.feat_ch]);
        let proj = prev_proj.forward(t, p, prev);
        let proj = t.elu(proj);
        let inp = t.concat(&[feat, proj], 1);

        let pres_logit = pres.forward(t, p, inp); // [B, 1]
        let eps_pres = noise
            .pres_logistic
            .index_axis(ndarray::Axis(1), i)
            .to_owned()
            .into_shape(IxDyn(&[b, 1]))
            .unwrap();
        let ec = t.constant(eps_pres);
        let shifted = t.add(pres_logit, ec);
        let scaled = t.scale(shifted, 1.0 / tau);
        let z_pres_i = t.sigmoid(scaled);

        let d_out = depth.forward(t, p, inp); // [B, 2]
        let d_mu = t.slice_axis(d_out, 1, 0, 1);
        let d_sr = t.slice_axis(d_out, 1, 1, 1);
        let d_sigma = t.softplus(d_sr);
        let eps_d = noise
            .depth
            .index_axis(ndarray::Axis(1), i)
            .to_owned()
            .into_shape(IxDyn(&[b, 1]))
            .unwrap();
        let z_depth_i = reparam(t, d_mu, d_sigma, &eps_d);

        let s_out = scale.forward(t, p, inp); // [B, 4]
        let s_mu = t.slice_axis(s_out, 1, 0, 2);
        let s_sr = t.slice_axis(s_out, 1, 2, 2);
        let s_sigma = t.softplus(s_sr);
        let eps_s = noise
            .scale
            .index_axis(ndarray::Axis(1), i)
            .to_owned()
            .into_shape(IxDyn(&[b, 2]))
            .unwrap();
        let z_scale_i = reparam(t, s_mu, s_sigma, &eps_s);

        let sh_out = shift.forward(t, p, inp);
        let sh_mu = t.slice_axis(sh_out, 1, 0, 2);
        let sh_sr = t.slice_axis(sh_out, 1, 2, 2);
        let sh_sigma = t.softplus(sh_sr);
        let eps_sh = noise
            .shift
            .index_axis(ndarray::Axis(1), i)
            .to_owned()
            .into_shape(IxDyn(&[b, 2]))
            .unwrap();
        let z_shift_i = reparam(t, sh_mu, sh_sigma, &eps_sh);

        // derive this cell's boxes: sigmoid scale, single-cell rescale
        let scale_v = t.sigmoid(z_scale_i);
        let local = t.tanh(z_shift_i);
        let center = t.constant(
            ArrayD::from_shape_vec(
                IxDyn(&[1, 2]),
                vec![sc::<S>(col as f64 + 0.5), sc::<S>(row as f64 + 0.5)],
            )
            .unwrap(),
        );
        let global = t.add(local, center);
        let scaled_shift = t.scale(global, 2.0 / grid as f64);
        let shift_v = t.add_scalar(scaled_shift, -1.0);
        let boxes_i = t.concat(&[scale_v, shift_v], 1); // [B, 4]

        let glimpse = st_extract(t, image, boxes_i, gs, 1)?;
        let (w_mu, w_sigma) = net.encode_glimpse(t, p, glimpse)?;
        let eps_w = {
            let mut rows = ArrayD::<S>::zeros(IxDyn(&[b, net.cfg.what_dim]));
            for bi in 0..b {
                for d in 0..net.cfg.what_dim {
                    rows[[bi, d]] = noise.what[[bi * g + i, d]];
                }
            }
            rows
        };
        let z_what_i = reparam(t, w_mu, w_sigma, &eps_w);
        let (o_att, alpha_att) = net.decode_glimpse(t, p, z_what_i)?;
        let zp = t.reshape(z_pres_i, &[b, 1, 1, 1]);
        let gated_mask = t.mul(alpha_att, zp);
        let y_att = t.mul(gated_mask, o_att);
        let pm = st_place(t, gated_mask, boxes_i, net.cfg.image_size, net.cfg.image_size)?;
        let pa = st_place(t, y_att, boxes_i, net.cfg.image_size, net.cfg.image_size)?;

        prev = t.concat(&[z_pres_i, z_depth_i, z_scale_i, z_shift_i, z_what_i], 1);

        pres_logits.push(pres_logit);
        pres_samples.push(z_pres_i);
        depth_mus.push(d_mu);
        depth_sigmas.push(d_sigma);
        depth_samples.push(z_depth_i);
        scale_mus.push(s_mu);
        scale_sigmas.push(s_sigma);
        scale_samples.push(z_scale_i);
        shift_mus.push(sh_mu);
        shift_sigmas.push(sh_sigma);
        shift_samples.push(z_shift_i);
        what_mus.push(w_mu);
        what_sigmas.push(w_sigma);
        what_samples.push(z_what_i);
        cell_boxes.push(boxes_i);
        placed_masks.push(pm);
        placed_apps.push(pa);
    }

    let stack2 = |t: &mut Tape<S>, parts: &[Var]| -> Var {
        let s = t.stack_new_axis(parts, 1); // [B, G, d]
        s
    };
    let pres_logit = {
        let s = stack2(t, &pres_logits);
        t.reshape(s, &[b, g])
    };
    let pres_prob = t.sigmoid(pres_logit);
    let z_pres = {
        let s = stack2(t, &pres_samples);
        t.reshape(s, &[b, g])
    };
    let depth_mu = {
        let s = stack2(t, &depth_mus);
        t.reshape(s, &[b, g])
    };
    let depth_sigma = {
        let s = stack2(t, &depth_sigmas);
        t.reshape(s, &[b, g])
    };
    let z_depth = {
        let s = stack2(t, &depth_samples);
        t.reshape(s, &[b, g])
    };
    let scale_mu = stack2(t, &scale_mus);
    let scale_sigma = stack2(t, &scale_sigmas);
    let z_scale_raw = stack2(t, &scale_samples);
    let shift_mu = stack2(t, &shift_mus);
    let shift_sigma = stack2(t, &shift_sigmas);
    let z_shift_raw = stack2(t, &shift_samples);
    let what_mu_s = {
        let s = stack2(t, &what_mus);
        t.reshape(s, &[b * g, net.cfg.what_dim])
    };
    let what_sigma_s = {
        let s = stack2(t, &what_sigmas);
        t.reshape(s, &[b * g, net.cfg.what_dim])
    };
    let z_what = {
        let s = stack2(t, &what_samples);
        t.reshape(s, &[b * g, net.cfg.what_dim])
    };
    let boxes = {
        let s = stack2(t, &cell_boxes);
        t.reshape(s, &[b * g, 4])
    };
    let pm = {
        let s = stack2(t, &placed_masks);
        t.reshape(s, &[b, g, 1, net.cfg.image_size, net.cfg.image_size])
    };
    let pa = {
        let s = stack2(t, &placed_apps);
        t.reshape(s, &[b, g, net.cfg.channels, net.cfg.image_size, net.cfg.image_size])
    };

    let render = composite_foreground(t, pm, pa, z_depth);
    let post = FgPosterior {
        pres_logit,
        pres_prob,
        depth_mu,
        depth_sigma,
        scale_mu,
        scale_sigma,
        shift_mu,
        shift_sigma,
        what_mu: Some(what_mu_s),
        what_sigma: Some(what_sigma_s),
    };
    let sample = FgSample { z_pres, z_depth, z_scale_raw, z_shift_raw, z_what, boxes };
    Ok((post, sample, render))
}
