//! Training objective: pixel-wise mixture log-likelihood, analytic KL
//! primitives, the relaxed Bernoulli sampler, boundary loss, and linear
//! annealing schedules.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image_ops::st_place;
use crate::scalar::{sc, Scalar};
use crate::tensor::{require, Tape, Var};

pub const LN_2PI: f64 = 1.8378770664093453;

/// Linearly annealed hyperparameter value, clamped outside its step window.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Schedule {
    pub start_value: f64,
    pub end_value: f64,
    pub start_step: u64,
    pub end_step: u64,
}

impl Schedule {
    pub fn constant(v: f64) -> Self {
        Schedule { start_value: v, end_value: v, start_step: 0, end_step: 0 }
    }

    pub fn new(start_value: f64, end_value: f64, start_step: u64, end_step: u64) -> Result<Self> {
        require(start_step <= end_step, "schedule start_step must be <= end_step")?;
        Ok(Schedule { start_value, end_value, start_step, end_step })
    }

    pub fn value(&self, step: u64) -> f64 {
        if step <= self.start_step || self.end_step == self.start_step {
            self.start_value
        } else if step >= self.end_step {
            self.end_value
        } else {
            let f = (step - self.start_step) as f64 / (self.end_step - self.start_step) as f64;
            self.start_value + f * (self.end_value - self.start_value)
        }
    }

    /// Rescale the step window, used when compressing paper-scale schedules
    /// onto shorter runs.
    pub fn compress(&self, factor: f64) -> Self {
        Schedule {
            start_value: self.start_value,
            end_value: self.end_value,
            start_step: (self.start_step as f64 * factor).round() as u64,
            end_step: (self.end_step as f64 * factor).round() as u64,
        }
    }
}

/// Closed-form KL between diagonal Gaussians, summed over every element.
pub fn gaussian_kl_scalar(mu_q: f64, sigma_q: f64, mu_p: f64, sigma_p: f64) -> Result<f64> {
    require(sigma_q > 0.0 && sigma_p > 0.0, "gaussian_kl stdevs must be positive")?;
    Ok((sigma_p / sigma_q).ln()
        + (sigma_q * sigma_q + (mu_q - mu_p) * (mu_q - mu_p)) / (2.0 * sigma_p * sigma_p)
        - 0.5)
}

/// Elementwise Gaussian KL on the tape; callers reduce as needed.
pub fn gaussian_kl_elem<S: Scalar>(
    t: &mut Tape<S>,
    mu_q: Var,
    sigma_q: Var,
    mu_p: Var,
    sigma_p: Var,
) -> Var {
    let ln_p = t.ln(sigma_p);
    let ln_q = t.ln(sigma_q);
    let ln_ratio = t.sub(ln_p, ln_q);
    let var_q = t.square(sigma_q);
    let dmu = t.sub(mu_q, mu_p);
    let dmu2 = t.square(dmu);
    let num = t.add(var_q, dmu2);
    let var_p = t.square(sigma_p);
    let two_var_p = t.scale(var_p, 2.0);
    let frac = t.div(num, two_var_p);
    let s = t.add(ln_ratio, frac);
    t.add_scalar(s, -0.5)
}

/// Gaussian KL summed over all dimensions, with stdev validation.
pub fn gaussian_kl<S: Scalar>(
    t: &mut Tape<S>,
    mu_q: Var,
    sigma_q: Var,
    mu_p: Var,
    sigma_p: Var,
) -> Result<Var> {
    for &v in [sigma_q, sigma_p].iter() {
        require(
            t.val(v).iter().all(|&s| s > S::zero()),
            "gaussian_kl stdevs must be positive",
        )?;
    }
    let e = gaussian_kl_elem(t, mu_q, sigma_q, mu_p, sigma_p);
    Ok(t.sum_all(e))
}

/// Closed-form Bernoulli KL between success probabilities.
pub fn bernoulli_kl_scalar(rho_q: f64, rho_p: f64) -> Result<f64> {
    require(
        rho_q > 0.0 && rho_q < 1.0 && rho_p > 0.0 && rho_p < 1.0,
        "bernoulli_kl probabilities must lie strictly in (0,1)",
    )?;
    Ok(rho_q * (rho_q / rho_p).ln() + (1.0 - rho_q) * ((1.0 - rho_q) / (1.0 - rho_p)).ln())
}

/// Bernoulli KL from posterior logits against a fixed prior probability,
/// elementwise; stable for saturated logits.
pub fn bernoulli_kl_from_logits<S: Scalar>(t: &mut Tape<S>, logit_q: Var, rho_p: f64) -> Result<Var> {
    require(rho_p > 0.0 && rho_p < 1.0, "prior probability must lie strictly in (0,1)")?;
    let rho = t.sigmoid(logit_q);
    let one_minus = t.neg(logit_q);
    let rho_c = t.sigmoid(one_minus);
    let ln_q = t.logsigmoid(logit_q);
    let ln_qc = t.logsigmoid(one_minus);
    let a = t.add_scalar(ln_q, -rho_p.ln());
    let b = t.add_scalar(ln_qc, -(1.0 - rho_p).ln());
    let ta = t.mul(rho, a);
    let tb = t.mul(rho_c, b);
    Ok(t.add(ta, tb))
}

/// One draw from the binary Gumbel-Softmax (Concrete) relaxation, plain
/// arithmetic; used by the Monte Carlo oracles.
pub fn gumbel_softmax_draw(rho: f64, tau: f64, rng: &mut ChaCha8Rng, hard: bool) -> Result<f64> {
    require(rho > 0.0 && rho < 1.0, "probability must lie strictly in (0,1)")?;
    require(tau > 0.0, "temperature must be positive")?;
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let eps = u.ln() - (1.0 - u).ln();
    let logit = (rho / (1.0 - rho)).ln();
    let y = 1.0 / (1.0 + (-(logit + eps) / tau).exp());
    Ok(if hard { f64::from(y > 0.5) } else { y })
}

/// Relaxed Bernoulli sample on the tape, reparameterized through the logits.
///
/// With `hard` the forward value is thresholded at 0.5 and the gradient
/// passes straight through the relaxed sample (visualization paths only).
pub fn gumbel_softmax_from_logits<S: Scalar>(
    t: &mut Tape<S>,
    logits: Var,
    tau: f64,
    rng: &mut ChaCha8Rng,
    hard: bool,
) -> Result<Var> {
    require(tau > 0.0, "temperature must be positive")?;
    let shape = t.shape(logits).to_vec();
    let noise = ArrayD::from_shape_simple_fn(IxDyn(&shape), || {
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        sc::<S>(u.ln() - (1.0 - u).ln())
    });
    let eps = t.constant(noise);
    let shifted = t.add(logits, eps);
    let scaled = t.scale(shifted, 1.0 / tau);
    let relaxed = t.sigmoid(scaled);
    if !hard {
        return Ok(relaxed);
    }
    let hard_vals = t.val(relaxed).mapv(|v| if v > sc::<S>(0.5) { S::one() } else { S::zero() });
    let hard_const = t.constant(hard_vals);
    let detached = t.detach(relaxed);
    let diff = t.sub(hard_const, detached);
    Ok(t.add(relaxed, diff))
}

/// Spec-surface sampler from probabilities; validates and defers to the
/// logit form.
pub fn gumbel_softmax_sample<S: Scalar>(
    t: &mut Tape<S>,
    rho: Var,
    tau: f64,
    rng: &mut ChaCha8Rng,
    hard: bool,
) -> Result<Var> {
    require(
        t.val(rho).iter().all(|&p| p > S::zero() && p < S::one()),
        "probabilities must lie strictly in (0,1)",
    )?;
    let ln_r = t.ln(rho);
    let one = t.scalar(S::one());
    let omr = t.sub(one, rho);
    let ln_omr = t.ln(omr);
    let logits = t.sub(ln_r, ln_omr);
    gumbel_softmax_from_logits(t, logits, tau, rng, hard)
}

/// Pixel-wise mixture parameters. `log_pi` is carried in log space straight
/// from the stick-breaking construction.
pub struct MixtureParams {
    /// [N, 1, H, W], foreground mixing probability in [0, 1]
    pub alpha: Var,
    /// [N, C, H, W]
    pub mu_fg: Var,
    /// [N, K, C, H, W]
    pub mu_bg: Var,
    /// [N, K, 1, H, W], log mixing maps summing to one across K
    pub log_pi: Var,
    pub sigma_fg: f64,
    pub sigma_bg: f64,
}

const ALPHA_EPS: f64 = 1e-6;

fn ln_gauss<S: Scalar>(t: &mut Tape<S>, x: Var, mu: Var, sigma: f64) -> Var {
    t.gauss_logpdf(x, mu, sigma)
}

/// log p(x | scene) summed over pixels and channels, per image: `[N]`.
///
/// The K+1 mixture branches are combined with log-sum-exp per pixel/channel.
pub fn pixel_mixture_loglik<S: Scalar>(t: &mut Tape<S>, x: Var, m: &MixtureParams) -> Result<Var> {
    require(m.sigma_fg > 0.0 && m.sigma_bg > 0.0, "mixture stdevs must be positive")?;
    let xs = t.shape(x).to_vec();
    require(xs.len() == 4, format!("image must be [N,C,H,W], got {xs:?}"))?;
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let k = t.shape(m.mu_bg)[1];

    let alpha_c = t.clamp(m.alpha, ALPHA_EPS, 1.0 - ALPHA_EPS);
    let ln_alpha = t.ln(alpha_c);
    let one = t.scalar(S::one());
    let om_alpha = t.sub(one, alpha_c);
    let ln_om = t.ln(om_alpha);
    let ln_om_alpha = t.reshape(ln_om, &[n, 1, 1, h, w]);

    // foreground branch [N, 1, C, H, W]
    let fg_ll = ln_gauss(t, x, m.mu_fg, m.sigma_fg);
    let fg_branch = t.add(fg_ll, ln_alpha);
    let fg_branch = t.reshape(fg_branch, &[n, 1, c, h, w]);

    // background branches [N, K, C, H, W]
    let xk = t.reshape(x, &[n, 1, c, h, w]);
    let xkb = t.broadcast_to(xk, &[n, k, c, h, w]);
    let bg_ll = ln_gauss(t, xkb, m.mu_bg, m.sigma_bg);
    let mix = t.add(m.log_pi, ln_om_alpha); // broadcast [N,K,1,H,W] + [N,1,H,W-as-broadcast]
    let bg_branch = t.add(bg_ll, mix);

    let branches = t.concat(&[fg_branch, bg_branch], 1);
    let per_pixel = t.logsumexp_axis(branches, 1); // [N, C, H, W]
    let flat = t.reshape(per_pixel, &[n, c * h * w]);
    Ok(t.sum_axis(flat, 1))
}

/// Boundary kernel: -1 in a band of thickness `b` along the glimpse border,
/// 0 in the interior.
pub fn boundary_kernel(gs: usize, b: usize) -> Result<ArrayD<f64>> {
    require(b > 0 && 2 * b < gs, format!("boundary thickness {b} out of range for glimpse {gs}"))?;
    let mut k = ArrayD::zeros(IxDyn(&[gs, gs]));
    for i in 0..gs {
        for j in 0..gs {
            if i < b || i >= gs - b || j < b || j >= gs - b {
                k[[i, j]] = -1.0;
            }
        }
    }
    Ok(k)
}

/// Boundary overlap penalty.
///
/// Each presence-gated cell's kernel is mapped to canvas coordinates at that
/// cell's box, multiplied with the global object mask, and the negated
/// product is averaged over batch and canvas.
pub fn boundary_loss<S: Scalar>(
    t: &mut Tape<S>,
    alpha: Var,
    boxes: Var,
    z_pres: Var,
    gs: usize,
    b: usize,
) -> Result<Var> {
    let ashape = t.shape(alpha).to_vec();
    require(ashape.len() == 4 && ashape[1] == 1, format!("alpha must be [N,1,H,W], got {ashape:?}"))?;
    let (n, h, w) = (ashape[0], ashape[2], ashape[3]);
    let m = t.shape(boxes)[0];
    require(m % n == 0, "box count must be a multiple of the batch size")?;
    let cells = m / n;

    let kernel = boundary_kernel(gs, b)?.mapv(|v| sc::<S>(-v)); // +1 band
    let kvar = t.constant(kernel.into_shape(IxDyn(&[1, 1, gs, gs])).unwrap());
    let kb = t.broadcast_to(kvar, &[m, 1, gs, gs]);
    let zp = t.reshape(z_pres, &[m, 1, 1, 1]);
    let gated = t.mul(kb, zp);
    let placed = st_place(t, gated, boxes, h, w)?; // [M, 1, H, W]
    let per_item = t.reshape(placed, &[n, cells, 1, h, w]);
    let summed = t.sum_axis(per_item, 1); // [N, 1, H, W]
    let overlap = t.mul(summed, alpha);
    Ok(t.mean_all(overlap))
}

/// The logged pieces of one objective evaluation (batch means, 0-d vars).
pub struct ElboBreakdown {
    pub total: Var,
    pub log_likelihood: Var,
    pub kl_fg: Var,
    pub kl_bg: Var,
    /// reported separately; not part of the ELBO
    pub boundary: Var,
}

/// Assemble the ELBO from per-image terms: `total = loglik - kl_fg - kl_bg`,
/// averaged over the batch.
pub fn elbo<S: Scalar>(
    t: &mut Tape<S>,
    loglik: Var,
    kl_fg: Var,
    kl_bg: Var,
    boundary: Var,
) -> ElboBreakdown {
    let l = t.mean_all(loglik);
    let kf = t.mean_all(kl_fg);
    let kb = t.mean_all(kl_bg);
    let kls = t.add(kf, kb);
    let total = t.sub(l, kls);
    ElboBreakdown { total, log_likelihood: l, kl_fg: kf, kl_bg: kb, boundary }
}

impl ElboBreakdown {
    /// Loss minimized by the optimizers: `-total + lambda_b * boundary`.
    pub fn objective<S: Scalar>(&self, t: &mut Tape<S>, lambda_b: f64) -> Var {
        let neg = t.neg(self.total);
        if lambda_b == 0.0 {
            return neg;
        }
        let pen = t.scale(self.boundary, lambda_b);
        t.add(neg, pen)
    }
}

/// Linear interpolation of a schedule at a step (clamped).
pub fn anneal(schedule: &Schedule, step: u64) -> f64 {
    schedule.value(step)
}
