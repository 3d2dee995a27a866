//! K-component mixture background.
//!
//! A recurrent chain emits one mask latent per component (each conditioned
//! on the previous components and the image), mask logits are decoded and
//! turned into pixel-wise mixing maps by stick-breaking, and a spatial
//! broadcast decoder paints each component's appearance. A separate prior
//! chain scores the same latents for the KL term and drives pure generation.

use ndarray::{ArrayD, Axis, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image_ops::spatial_broadcast;
use crate::model::ModelConfig;
use crate::nn::{Bound, Conv2dLayer, GroupNorm, Linear, LstmCell, ParamId, ParamStore};
use crate::objective::gaussian_kl_elem;
use crate::rngutil::normal_array;
use crate::scalar::Scalar;
use crate::tensor::{require, Conv2dSpec, Tape, Var};

/// Per-component posterior parameters, each `[B, D]`, in chain order.
pub struct BgPosterior {
    pub mask_mu: Vec<Var>,
    pub mask_sigma: Vec<Var>,
    pub comp_mu: Vec<Var>,
    pub comp_sigma: Vec<Var>,
}

/// Sampled chain latents.
pub struct BgSample {
    pub z_mask: Vec<Var>,
    pub z_comp: Var, // [B*K, D], component-major within batch
}

/// Mixing maps and appearance means.
pub struct BgRender {
    /// [B, K, 1, H, W], log of the mixing maps (sums to one across K)
    pub log_pi: Var,
    /// [B, K, 1, H, W]
    pub pi: Var,
    /// [B, K, C, H, W], sigmoid-bounded appearance means
    pub mu_bg: Var,
}

/// Fixed reparameterization noise for one background pass.
pub struct BgNoise<S: Scalar> {
    pub mask: Vec<ArrayD<S>>,
    pub comp: ArrayD<S>,
}

impl<S: Scalar> BgNoise<S> {
    pub fn draw(rng: &mut ChaCha8Rng, batch: usize, k: usize, latent_dim: usize) -> Self {
        let mask = (0..k).map(|_| normal_array(rng, &[batch, latent_dim])).collect();
        let comp = normal_array(rng, &[batch * k, latent_dim]);
        BgNoise { mask, comp }
    }
}

struct ConvGnB {
    conv: Conv2dLayer,
    gn: GroupNorm,
}

impl ConvGnB {
    fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        spec: Conv2dSpec,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        ConvGnB {
            conv: Conv2dLayer::new(ps, name, in_ch, out_ch, kernel, spec, rng),
            gn: GroupNorm::new(
                ps,
                &format!("{name}.gn"),
                out_ch,
                crate::foreground::norm_groups(out_ch),
            ),
        }
    }

    fn forward<S: Scalar>(&self, t: &mut Tape<S>, p: &Bound, x: Var) -> Var {
        let y = self.conv.forward(t, p, x);
        let y = self.gn.forward(t, p, y);
        t.elu(y)
    }
}

pub struct BgNet {
    img_enc: Vec<ConvGnB>,
    img_enc_out: Linear,
    lstm_post: LstmCell,
    h0_post: ParamId,
    c0_post: ParamId,
    predict_mask: Linear,
    mask_dec_in: Conv2dLayer,
    mask_dec: Vec<(crate::nn::ConvSub, GroupNorm)>,
    mask_dec_out: Conv2dLayer,
    comp_enc: Vec<ConvGnB>,
    comp_enc_out: Linear,
    comp_dec: Vec<Conv2dLayer>,
    comp_dec_out: Conv2dLayer,
    lstm_prior: LstmCell,
    h0_prior: ParamId,
    c0_prior: ParamId,
    predict_mask_prior: Linear,
    predict_comp: (Linear, Linear, Linear),
    dims: BgDims,
}

#[derive(Clone, Copy)]
struct BgDims {
    image_size: usize,
    channels: usize,
    latent: usize,
    hidden: usize,
    comp_stride: usize,
    mask_stride: usize,
}

/// Upsampling factors from 1x1 to the image size: fours, then a final two
/// when needed.
fn upsample_factors(size: usize) -> Vec<usize> {
    let mut s = size;
    let mut out = Vec::new();
    while s > 1 {
        if s % 4 == 0 {
            out.push(4);
            s /= 4;
        } else {
            out.push(2);
            s /= 2;
        }
    }
    out
}

fn enc_downs(size: usize) -> usize {
    // stride-2 chain ending at 4x4
    (size / 4).trailing_zeros() as usize
}

impl BgNet {
    pub fn new<S: Scalar>(ps: &mut ParamStore<S>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.bg_latent_dim;
        let hid = cfg.lstm_hidden;

        let mut img_enc = Vec::new();
        let mut ch = cfg.channels;
        for i in 0..enc_downs(cfg.image_size) {
            img_enc.push(ConvGnB::new(
                ps,
                &format!("bg.ienc{i}"),
                ch,
                cfg.bg_enc_ch,
                3,
                Conv2dSpec::new(2, 1),
                rng,
            ));
            ch = cfg.bg_enc_ch;
        }
        let img_enc_out = Linear::new(ps, "bg.ienc_out", ch * 16, cfg.bg_img_feat, rng);

        let lstm_post = LstmCell::new(ps, "bg.lstm_post", d + cfg.bg_img_feat, hid, rng);
        let h0_post = ps.add("bg.h0_post", ArrayD::zeros(IxDyn(&[1, hid])));
        let c0_post = ps.add("bg.c0_post", ArrayD::zeros(IxDyn(&[1, hid])));
        let predict_mask = Linear::new(ps, "bg.predict_mask", hid, 2 * d, rng);

        let mut mask_dec = Vec::new();
        let mut mch = cfg.mask_dec_ch;
        let mask_dec_in = Conv2dLayer::new(ps, "bg.mdec_in", d, mch, 1, Conv2dSpec::new(1, 0), rng);
        for (i, f) in upsample_factors(cfg.image_size / cfg.mask_dec_stride).into_iter().enumerate() {
            let next = (mch / 2).max(16);
            mask_dec.push((
                crate::nn::ConvSub::new(ps, &format!("bg.mdec{i}"), mch, next, f, rng),
                GroupNorm::new(
                    ps,
                    &format!("bg.mdec{i}.gn"),
                    next,
                    crate::foreground::norm_groups(next),
                ),
            ));
            mch = next;
        }
        let mask_dec_out =
            Conv2dLayer::new(ps, "bg.mdec_out", mch, 1, 3, Conv2dSpec::new(1, 1), rng);

        let mut comp_enc = Vec::new();
        let mut cch = cfg.channels + 1;
        for i in 0..enc_downs(cfg.image_size) {
            comp_enc.push(ConvGnB::new(
                ps,
                &format!("bg.cenc{i}"),
                cch,
                cfg.bg_enc_ch,
                3,
                Conv2dSpec::new(2, 1),
                rng,
            ));
            cch = cfg.bg_enc_ch;
        }
        let comp_enc_out = Linear::new(ps, "bg.cenc_out", cch * 16, 2 * d, rng);

        let mut comp_dec = Vec::new();
        let mut dch = d + 2;
        for i in 0..3 {
            comp_dec.push(Conv2dLayer::new(
                ps,
                &format!("bg.cdec{i}"),
                dch,
                cfg.comp_ch,
                3,
                Conv2dSpec::new(1, 1),
                rng,
            ));
            dch = cfg.comp_ch;
        }
        let comp_dec_out =
            Conv2dLayer::new(ps, "bg.cdec_out", dch, cfg.channels, 3, Conv2dSpec::new(1, 1), rng);

        let lstm_prior = LstmCell::new(ps, "bg.lstm_prior", d, hid, rng);
        let h0_prior = ps.add("bg.h0_prior", ArrayD::zeros(IxDyn(&[1, hid])));
        let c0_prior = ps.add("bg.c0_prior", ArrayD::zeros(IxDyn(&[1, hid])));
        let predict_mask_prior = Linear::new(ps, "bg.predict_mask_prior", hid, 2 * d, rng);
        let predict_comp = (
            Linear::new(ps, "bg.predict_comp0", d, 64, rng),
            Linear::new(ps, "bg.predict_comp1", 64, 64, rng),
            Linear::new(ps, "bg.predict_comp2", 64, 2 * d, rng),
        );

        BgNet {
            img_enc,
            img_enc_out,
            lstm_post,
            h0_post,
            c0_post,
            predict_mask,
            mask_dec_in,
            mask_dec,
            mask_dec_out,
            comp_enc,
            comp_enc_out,
            comp_dec,
            comp_dec_out,
            lstm_prior,
            h0_prior,
            c0_prior,
            predict_mask_prior,
            predict_comp,
            dims: BgDims {
                image_size: cfg.image_size,
                channels: cfg.channels,
                latent: cfg.bg_latent_dim,
                hidden: cfg.lstm_hidden,
                comp_stride: cfg.comp_dec_stride,
                mask_stride: cfg.mask_dec_stride,
            },
        }
    }

    /// Deterministic image embedding `[B, C, S, S] -> [B, F]`.
    pub fn encode_background_image<S: Scalar>(&self, t: &mut Tape<S>, p: &Bound, image: Var) -> Var {
        let mut h = image;
        for layer in &self.img_enc {
            h = layer.forward(t, p, h);
        }
        let hs = t.shape(h).to_vec();
        let flat = t.reshape(h, &[hs[0], hs[1] * hs[2] * hs[3]]);
        let e = self.img_enc_out.forward(t, p, flat);
        t.elu(e)
    }

    fn decode_masks<S: Scalar>(&self, t: &mut Tape<S>, p: &Bound, z_masks: &[Var], b: usize) -> Var {
        let k = z_masks.len();
        let stacked = t.stack_new_axis(z_masks, 1); // [B, K, D]
        let flat = t.reshape(stacked, &[b * k, self.dims.latent]);
        let z = t.reshape(flat, &[b * k, self.dims.latent, 1, 1]);
        let mut h = self.mask_dec_in.forward(t, p, z);
        h = t.elu(h);
        for (up, gn) in &self.mask_dec {
            h = up.forward(t, p, h);
            h = gn.forward(t, p, h);
            h = t.elu(h);
        }
        let logits = self.mask_dec_out.forward(t, p, h);
        let logits = t.upsample_nearest(logits, self.dims.mask_stride);
        t.reshape(logits, &[b, k, 1, self.dims.image_size, self.dims.image_size])
    }

    fn decode_comps<S: Scalar>(&self, t: &mut Tape<S>, p: &Bound, z_comp: Var, b: usize, k: usize) -> Result<Var> {
        let s = self.dims.image_size;
        let r = self.dims.comp_stride;
        let mut h = spatial_broadcast(t, z_comp, s / r, s / r)?;
        for layer in &self.comp_dec {
            h = layer.forward(t, p, h);
            h = t.elu(h);
        }
        let raw = self.comp_dec_out.forward(t, p, h);
        let up = t.upsample_nearest(raw, r);
        let mu = t.sigmoid(up);
        Ok(t.reshape(mu, &[b, k, self.dims.channels, s, s]))
    }
}

/// Pixel-wise stick-breaking over raw mask logits `[B, K, 1, H, W]`,
/// computed in log space: component k takes a sigmoid share of what the
/// first k-1 left, and the last component takes the remainder.
///
/// Returns `(pi, log_pi)`.
pub fn stick_breaking<S: Scalar>(t: &mut Tape<S>, raw_logits: Var) -> Result<(Var, Var)> {
    let shape = t.shape(raw_logits).to_vec();
    require(shape.len() == 5, format!("mask logits must be [B,K,1,H,W], got {shape:?}"))?;
    let k = shape[1];
    require(k >= 1, "need at least one component")?;
    let log_s = t.logsigmoid(raw_logits);
    let neg = t.neg(raw_logits);
    let log_1ms = t.logsigmoid(neg);
    let mut parts = Vec::with_capacity(k);
    let mut remainder: Option<Var> = None; // sum of log(1 - s_j) for j < k
    for ki in 0..k {
        let log_pi_k = if ki + 1 < k {
            let s_k = t.slice_axis(log_s, 1, ki, 1);
            match remainder {
                Some(r) => t.add(s_k, r),
                None => s_k,
            }
        } else {
            match remainder {
                Some(r) => r,
                None => t.constant(ArrayD::zeros(IxDyn(&[shape[0], 1, 1, shape[3], shape[4]]))),
            }
        };
        parts.push(log_pi_k);
        if ki + 1 < k {
            let l1ms_k = t.slice_axis(log_1ms, 1, ki, 1);
            remainder = Some(match remainder {
                Some(r) => t.add(r, l1ms_k),
                None => l1ms_k,
            });
        }
    }
    let log_pi = t.concat(&parts, 1);
    let pi = t.exp(log_pi);
    Ok((pi, log_pi))
}

/// Posterior chain over the background components (Alg.-style inference).
pub fn infer_background<S: Scalar>(
    net: &BgNet,
    t: &mut Tape<S>,
    p: &Bound,
    image: Var,
    k: usize,
    noise: &BgNoise<S>,
) -> Result<(BgPosterior, BgSample, BgRender)> {
    require(k >= 1, "component count K must be >= 1")?;
    let b = t.shape(image)[0];
    let d = net.dims.latent;
    let e_img = net.encode_background_image(t, p, image);

    let h0 = t.broadcast_to(p.var(net.h0_post), &[b, net.dims.hidden]);
    let c0 = t.broadcast_to(p.var(net.c0_post), &[b, net.dims.hidden]);
    let (mut h, mut c) = (h0, c0);
    let mut z_prev = t.constant(ArrayD::zeros(IxDyn(&[b, d])));
    let mut mask_mu = Vec::with_capacity(k);
    let mut mask_sigma = Vec::with_capacity(k);
    let mut z_mask = Vec::with_capacity(k);
    for ki in 0..k {
        let inp = t.concat(&[z_prev, e_img], 1);
        let (h2, c2) = net.lstm_post.forward(t, p, inp, h, c);
        h = h2;
        c = c2;
        let out = net.predict_mask.forward(t, p, h);
        let mu = t.slice_axis(out, 1, 0, d);
        let sr = t.slice_axis(out, 1, d, d);
        let sigma = t.softplus(sr);
        let eps = t.constant(noise.mask[ki].clone());
        let se = t.mul(sigma, eps);
        let z = t.add(mu, se);
        mask_mu.push(mu);
        mask_sigma.push(sigma);
        z_mask.push(z);
        z_prev = z;
    }

    // masks decoded in one batched pass after the latent chain; the
    // dependency structure (z^m_k on z^m_<k only) is preserved
    let raw = net.decode_masks(t, p, &z_mask, b);
    let (pi, log_pi) = stick_breaking(t, raw)?;

    let s = net.dims.image_size;
    let ximg = t.reshape(image, &[b, 1, net.dims.channels, s, s]);
    let xb = t.broadcast_to(ximg, &[b, k, net.dims.channels, s, s]);
    let xflat = t.reshape(xb, &[b * k, net.dims.channels, s, s]);
    let piflat = t.reshape(pi, &[b * k, 1, s, s]);
    let comp_in = t.concat(&[piflat, xflat], 1);
    let mut hcomp = comp_in;
    for layer in &net.comp_enc {
        hcomp = layer.forward(t, p, hcomp);
    }
    let hs = t.shape(hcomp).to_vec();
    let flat = t.reshape(hcomp, &[hs[0], hs[1] * hs[2] * hs[3]]);
    let comp_out = net.comp_enc_out.forward(t, p, flat);
    let comp_mu_all = t.slice_axis(comp_out, 1, 0, d);
    let comp_sr = t.slice_axis(comp_out, 1, d, d);
    let comp_sigma_all = t.softplus(comp_sr);
    let eps = t.constant(noise.comp.clone());
    let se = t.mul(comp_sigma_all, eps);
    let z_comp = t.add(comp_mu_all, se);

    let mu_bg = net.decode_comps(t, p, z_comp, b, k)?;

    // split per-component posterior views for the KL term
    let comp_mu_r = t.reshape(comp_mu_all, &[b, k, d]);
    let comp_sigma_r = t.reshape(comp_sigma_all, &[b, k, d]);
    let mut comp_mu = Vec::with_capacity(k);
    let mut comp_sigma = Vec::with_capacity(k);
    for ki in 0..k {
        let m = t.slice_axis(comp_mu_r, 1, ki, 1);
        comp_mu.push(t.reshape(m, &[b, d]));
        let sg = t.slice_axis(comp_sigma_r, 1, ki, 1);
        comp_sigma.push(t.reshape(sg, &[b, d]));
    }

    Ok((
        BgPosterior { mask_mu, mask_sigma, comp_mu, comp_sigma },
        BgSample { z_mask, z_comp },
        BgRender { log_pi, pi, mu_bg },
    ))
}

/// KL of the background chain: the prior heads are evaluated at the
/// posterior's sampled mask latents. Returns `[B]`.
pub fn background_kl<S: Scalar>(
    net: &BgNet,
    t: &mut Tape<S>,
    p: &Bound,
    posterior: &BgPosterior,
    sample: &BgSample,
) -> Result<Var> {
    let k = posterior.mask_mu.len();
    let b = t.shape(posterior.mask_mu[0])[0];
    let d = net.dims.latent;

    let h0 = t.broadcast_to(p.var(net.h0_prior), &[b, net.dims.hidden]);
    let c0 = t.broadcast_to(p.var(net.c0_prior), &[b, net.dims.hidden]);
    let (mut h, mut c) = (h0, c0);
    let mut z_prev = t.constant(ArrayD::zeros(IxDyn(&[b, d])));
    let mut total: Option<Var> = None;
    for ki in 0..k {
        let (h2, c2) = net.lstm_prior.forward(t, p, z_prev, h, c);
        h = h2;
        c = c2;
        let prior_out = net.predict_mask_prior.forward(t, p, h);
        let pm = t.slice_axis(prior_out, 1, 0, d);
        let psr = t.slice_axis(prior_out, 1, d, d);
        let ps = t.softplus(psr);
        let kl_m_e = gaussian_kl_elem(t, posterior.mask_mu[ki], posterior.mask_sigma[ki], pm, ps);
        let kl_m = t.sum_axis(kl_m_e, 1);

        let z_m = sample.z_mask[ki];
        let c1 = net.predict_comp.0.forward(t, p, z_m);
        let c1 = t.elu(c1);
        let c2v = net.predict_comp.1.forward(t, p, c1);
        let c2v = t.elu(c2v);
        let cp = net.predict_comp.2.forward(t, p, c2v);
        let cpm = t.slice_axis(cp, 1, 0, d);
        let cps_r = t.slice_axis(cp, 1, d, d);
        let cps = t.softplus(cps_r);
        let kl_c_e = gaussian_kl_elem(t, posterior.comp_mu[ki], posterior.comp_sigma[ki], cpm, cps);
        let kl_c = t.sum_axis(kl_c_e, 1);

        let kl = t.add(kl_m, kl_c);
        total = Some(match total {
            Some(acc) => t.add(acc, kl),
            None => kl,
        });
        z_prev = z_m;
    }
    Ok(total.expect("k >= 1"))
}

/// Pure generation: run the prior chain with no image input.
pub fn generate_background<S: Scalar>(
    net: &BgNet,
    t: &mut Tape<S>,
    p: &Bound,
    k: usize,
    batch: usize,
    noise: &BgNoise<S>,
) -> Result<BgRender> {
    require(k >= 1, "component count K must be >= 1")?;
    let b = batch;
    let d = net.dims.latent;
    let h0 = t.broadcast_to(p.var(net.h0_prior), &[b, net.dims.hidden]);
    let c0 = t.broadcast_to(p.var(net.c0_prior), &[b, net.dims.hidden]);
    let (mut h, mut c) = (h0, c0);
    let mut z_prev = t.constant(ArrayD::zeros(IxDyn(&[b, d])));
    let mut z_mask = Vec::with_capacity(k);
    let mut z_comp_parts = Vec::with_capacity(k);
    for ki in 0..k {
        let (h2, c2) = net.lstm_prior.forward(t, p, z_prev, h, c);
        h = h2;
        c = c2;
        let prior_out = net.predict_mask_prior.forward(t, p, h);
        let pm = t.slice_axis(prior_out, 1, 0, d);
        let psr = t.slice_axis(prior_out, 1, d, d);
        let ps = t.softplus(psr);
        let eps = t.constant(noise.mask[ki].clone());
        let se = t.mul(ps, eps);
        let z_m = t.add(pm, se);

        let c1 = net.predict_comp.0.forward(t, p, z_m);
        let c1 = t.elu(c1);
        let c2v = net.predict_comp.1.forward(t, p, c1);
        let c2v = t.elu(c2v);
        let cp = net.predict_comp.2.forward(t, p, c2v);
        let cpm = t.slice_axis(cp, 1, 0, d);
        let cps_r = t.slice_axis(cp, 1, d, d);
        let cps = t.softplus(cps_r);
        let eps_c = noise.comp.slice_axis(Axis(0), ndarray::Slice::from(ki * b..(ki + 1) * b));
        let ec = t.constant(eps_c.to_owned());
        let sec = t.mul(cps, ec);
        let z_c = t.add(cpm, sec);

        z_mask.push(z_m);
        z_comp_parts.push(z_c);
        z_prev = z_m;
    }
    let raw = net.decode_masks(t, p, &z_mask, b);
    let (pi, log_pi) = stick_breaking(t, raw)?;
    // reorder component-major draws into [B*K, D] batch-major
    let zc_stack = t.stack_new_axis(&z_comp_parts, 1); // [B, K, D]
    let z_comp = t.reshape(zc_stack, &[b * k, d]);
    let mu_bg = net.decode_comps(t, p, z_comp, b, k)?;
    Ok(BgRender { log_pi, pi, mu_bg })
}
