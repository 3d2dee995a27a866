//! Whole-scene model: configuration, parameter construction, and the full
//! forward pass that produces the ELBO breakdown for one batch.

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::background::{
    background_kl, infer_background, BgNet, BgNoise, BgPosterior, BgRender, BgSample,
};
use crate::error::Result;
use crate::foreground::{
    foreground_kl, infer_foreground, FgMode, FgNet, FgNoise, FgPosterior, FgPrior, FgRender,
    FgSample,
};
use crate::nn::{Bound, ParamStore};
use crate::objective::{boundary_loss, elbo, pixel_mixture_loglik, ElboBreakdown, MixtureParams};
use crate::scalar::{sc, Scalar};
use crate::tensor::{require, Tape, Var};

/// Architecture hyperparameters. The paper-scale defaults are trimmed by the
/// `desk*` constructors to sizes a CPU run can train.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub grid: usize,
    pub glimpse_size: usize,
    pub what_dim: usize,
    pub fg_base_ch: usize,
    pub fg_feat_ch: usize,
    pub fg_extra_convs: bool,
    pub fg_residual: bool,
    pub fg_norm: bool,
    pub glimpse_base_ch: usize,
    pub glimpse_dec_ch: usize,
    pub k: usize,
    pub bg_latent_dim: usize,
    pub bg_img_feat: usize,
    pub bg_enc_ch: usize,
    pub mask_dec_ch: usize,
    /// mask logits decode at image_size / this, then upsample
    pub mask_dec_stride: usize,
    pub comp_ch: usize,
    /// spatial-broadcast decode stride: 1 decodes at full resolution,
    /// 2 decodes at half resolution and nearest-upsamples
    pub comp_dec_stride: usize,
    pub lstm_hidden: usize,
    pub seq_proj_dim: usize,
    pub mode: FgMode,
}

impl ModelConfig {
    /// Full-scale architecture (128x128, 16x16 grid).
    pub fn paper() -> Self {
        ModelConfig {
            image_size: 128,
            channels: 3,
            grid: 16,
            glimpse_size: 32,
            what_dim: 32,
            fg_base_ch: 16,
            fg_feat_ch: 128,
            fg_extra_convs: true,
            fg_residual: true,
            fg_norm: true,
            glimpse_base_ch: 16,
            glimpse_dec_ch: 128,
            k: 5,
            bg_latent_dim: 32,
            bg_img_feat: 64,
            bg_enc_ch: 64,
            mask_dec_ch: 128,
            mask_dec_stride: 1,
            comp_ch: 32,
            comp_dec_stride: 1,
            lstm_hidden: 64,
            seq_proj_dim: 32,
            mode: FgMode::Parallel,
        }
    }

    /// CPU-trainable configuration for 64x64 scenes.
    pub fn desk64(grid: usize, k: usize) -> Self {
        ModelConfig {
            image_size: 64,
            channels: 3,
            grid,
            glimpse_size: 16,
            what_dim: 32,
            fg_base_ch: 16,
            fg_feat_ch: 64,
            fg_extra_convs: false,
            fg_residual: true,
            fg_norm: true,
            glimpse_base_ch: 16,
            glimpse_dec_ch: 32,
            k,
            bg_latent_dim: 32,
            bg_img_feat: 64,
            bg_enc_ch: 32,
            mask_dec_ch: 32,
            mask_dec_stride: 2,
            comp_ch: 16,
            comp_dec_stride: 2,
            lstm_hidden: 64,
            seq_proj_dim: 32,
            mode: FgMode::Parallel,
        }
    }

    /// Minimal model for gradient checks: 8x8 images, 2x2 grid, K=2.
    pub fn toy() -> Self {
        ModelConfig {
            image_size: 8,
            channels: 3,
            grid: 2,
            glimpse_size: 4,
            what_dim: 4,
            fg_base_ch: 4,
            fg_feat_ch: 8,
            fg_extra_convs: false,
            fg_residual: true,
            fg_norm: true,
            glimpse_base_ch: 4,
            glimpse_dec_ch: 16,
            k: 2,
            bg_latent_dim: 4,
            bg_img_feat: 8,
            bg_enc_ch: 4,
            mask_dec_ch: 16,
            mask_dec_stride: 1,
            comp_ch: 4,
            comp_dec_stride: 1,
            lstm_hidden: 8,
            seq_proj_dim: 8,
            mode: FgMode::Parallel,
        }
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn validate(&self) -> Result<()> {
        require(self.image_size.is_power_of_two() && self.image_size >= 8, "image_size must be a power of two >= 8")?;
        require(self.grid.is_power_of_two() && self.grid >= 2, "grid must be a power of two >= 2")?;
        require(self.grid < self.image_size, "grid must be smaller than image_size")?;
        require(self.image_size % self.grid == 0, "image_size must be divisible by grid")?;
        require(self.glimpse_size.is_power_of_two() && self.glimpse_size >= 4, "glimpse_size must be a power of two >= 4")?;
        require(self.channels >= 1, "channels must be >= 1")?;
        require(self.what_dim >= 1, "what_dim must be >= 1")?;
        require((1..=8).contains(&self.k), "component count K must lie in 1..=8")?;
        require(self.bg_latent_dim >= 1, "bg_latent_dim must be >= 1")?;
        require(
            self.comp_dec_stride >= 1 && self.image_size % self.comp_dec_stride == 0,
            "comp_dec_stride must divide the image size",
        )?;
        require(
            self.mask_dec_stride >= 1 && self.image_size % self.mask_dec_stride == 0,
            "mask_dec_stride must divide the image size",
        )?;
        Ok(())
    }
}

/// Per-step hyperparameter values, resolved from schedules by the caller.
#[derive(Clone, Copy, Debug)]
pub struct StepHyper {
    pub tau: f64,
    pub pres_prior: f64,
    pub scale_prior_mean: f64,
    pub scale_prior_std: f64,
    pub sigma_fg: f64,
    pub sigma_bg: f64,
    /// clamp the composited foreground mixing map to this constant
    pub alpha_fix: Option<f64>,
    /// boundary band thickness and loss weight, when active
    pub boundary: Option<(usize, f64)>,
}

impl StepHyper {
    pub fn plain() -> Self {
        StepHyper {
            tau: 1.0,
            pres_prior: 0.1,
            scale_prior_mean: -1.0,
            scale_prior_std: 0.1,
            sigma_fg: 0.15,
            sigma_bg: 0.15,
            alpha_fix: None,
            boundary: None,
        }
    }
}

/// All reparameterization noise for one forward pass.
pub struct ModelNoise<S: Scalar> {
    pub fg: FgNoise<S>,
    pub bg: BgNoise<S>,
}

impl<S: Scalar> ModelNoise<S> {
    pub fn draw(rng: &mut ChaCha8Rng, batch: usize, cfg: &ModelConfig) -> Self {
        ModelNoise {
            fg: FgNoise::draw(rng, batch, cfg.cells(), cfg.what_dim),
            bg: BgNoise::draw(rng, batch, cfg.k, cfg.bg_latent_dim),
        }
    }

    /// All-zero noise: latents collapse to their posterior means, which is
    /// what evaluation-time inference uses.
    pub fn zeros(batch: usize, cfg: &ModelConfig) -> Self {
        let g = cfg.cells();
        ModelNoise {
            fg: FgNoise {
                pres_logistic: ArrayD::zeros(IxDyn(&[batch, g])),
                depth: ArrayD::zeros(IxDyn(&[batch, g])),
                scale: ArrayD::zeros(IxDyn(&[batch, g, 2])),
                shift: ArrayD::zeros(IxDyn(&[batch, g, 2])),
                what: ArrayD::zeros(IxDyn(&[batch * g, cfg.what_dim])),
            },
            bg: BgNoise {
                mask: (0..cfg.k).map(|_| ArrayD::zeros(IxDyn(&[batch, cfg.bg_latent_dim]))).collect(),
                comp: ArrayD::zeros(IxDyn(&[batch * cfg.k, cfg.bg_latent_dim])),
            },
        }
    }
}

/// Everything one forward pass produces; variables index into the caller's
/// tape.
pub struct ForwardPass {
    pub bound: Bound,
    pub fg_post: FgPosterior,
    pub fg_sample: FgSample,
    pub fg_render: FgRender,
    pub bg_post: BgPosterior,
    pub bg_sample: BgSample,
    pub bg_render: BgRender,
    pub breakdown: ElboBreakdown,
    /// composited mean reconstruction [B, C, H, W]
    pub recon: Var,
    /// the mixing map actually used by the likelihood (after any fix)
    pub alpha_used: Var,
}

pub struct SceneModel<S: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    pub fg: FgNet,
    pub bg: BgNet,
}

impl<S: Scalar> SceneModel<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let fg = FgNet::new(&mut params, &config, &mut rng);
        let bg = BgNet::new(&mut params, &config, &mut rng);
        Ok(SceneModel { config, params, fg, bg })
    }

    /// Full forward pass on a `[B, C, S, S]` batch.
    pub fn forward(
        &self,
        t: &mut Tape<S>,
        images: &ArrayD<S>,
        hp: &StepHyper,
        noise: &ModelNoise<S>,
    ) -> Result<ForwardPass> {
        let shape = images.shape().to_vec();
        require(
            shape.len() == 4
                && shape[1] == self.config.channels
                && shape[2] == self.config.image_size
                && shape[3] == self.config.image_size,
            format!("batch shape {shape:?} does not match the model configuration"),
        )?;
        let b = shape[0];
        let p = self.params.bind(t);
        let x = t.constant(images.clone());

        let (fg_post, fg_sample, fg_render) =
            infer_foreground(&self.fg, t, &p, x, &noise.fg, self.config.mode, hp.tau)?;
        let (bg_post, bg_sample, bg_render) =
            infer_background(&self.bg, t, &p, x, self.config.k, &noise.bg)?;

        let alpha_used = match hp.alpha_fix {
            Some(v) => t.constant(ArrayD::from_elem(
                IxDyn(&[b, 1, self.config.image_size, self.config.image_size]),
                sc::<S>(v),
            )),
            None => fg_render.alpha,
        };

        let mixture = MixtureParams {
            alpha: alpha_used,
            mu_fg: fg_render.mu_fg,
            mu_bg: bg_render.mu_bg,
            log_pi: bg_render.log_pi,
            sigma_fg: hp.sigma_fg,
            sigma_bg: hp.sigma_bg,
        };
        let loglik = pixel_mixture_loglik(t, x, &mixture)?;

        let prior = FgPrior {
            pres_prob: hp.pres_prior,
            scale_mean: hp.scale_prior_mean,
            scale_std: hp.scale_prior_std,
        };
        let kl_fg = foreground_kl(t, &fg_post, &prior, &fg_sample)?;
        let kl_bg = background_kl(&self.bg, t, &p, &bg_post, &bg_sample)?;

        let boundary = match hp.boundary {
            Some((band, _)) => {
                let zp = fg_sample.z_pres;
                boundary_loss(
                    t,
                    fg_render.alpha,
                    fg_sample.boxes,
                    zp,
                    self.config.glimpse_size,
                    band,
                )?
            }
            None => t.scalar(S::zero()),
        };

        let breakdown = elbo(t, loglik, kl_fg, kl_bg, boundary);

        // recon = alpha * mu_fg + (1 - alpha) * sum_k pi_k mu_bg_k
        let s = self.config.image_size;
        let pim = t.mul(bg_render.pi, bg_render.mu_bg);
        let bg_mean = t.sum_axis(pim, 1); // [B, C, S, S]
        let fg_part = t.mul(alpha_used, fg_render.mu_fg);
        let one = t.scalar(S::one());
        let om = t.sub(one, alpha_used);
        let bg_part = t.mul(om, bg_mean);
        let recon = t.add(fg_part, bg_part);
        let recon = t.reshape(recon, &[b, self.config.channels, s, s]);

        Ok(ForwardPass {
            bound: p,
            fg_post,
            fg_sample,
            fg_render,
            bg_post,
            bg_sample,
            bg_render,
            breakdown,
            recon,
            alpha_used,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy_forward(
        seed: u64,
    ) -> (SceneModel<f64>, Tape<f64>, ForwardPass, ArrayD<f64>) {
        let model = SceneModel::<f64>::new(ModelConfig::toy(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let images = ArrayD::from_shape_simple_fn(IxDyn(&[2, 3, 8, 8]), || rng.gen_range(0.0..1.0));
        let noise = ModelNoise::draw(&mut rng, 2, &model.config);
        let mut tape = Tape::new();
        let hp = StepHyper::plain();
        let fwd = model.forward(&mut tape, &images, &hp, &noise).unwrap();
        (model, tape, fwd, images)
    }

    #[test]
    fn breakdown_identity_holds() {
        let (_, tape, fwd, _) = toy_forward(1);
        let total = tape.scalar_value(fwd.breakdown.total);
        let parts = tape.scalar_value(fwd.breakdown.log_likelihood)
            - tape.scalar_value(fwd.breakdown.kl_fg)
            - tape.scalar_value(fwd.breakdown.kl_bg);
        assert!((total - parts).abs() < 1e-6, "{total} vs {parts}");
    }

    /// Every posterior-parameter branch must carry gradient: no dead paths
    /// from the objective back to the encoder heads.
    #[test]
    fn gradient_reaches_every_posterior_branch() {
        let (_, mut tape, fwd, _) = toy_forward(2);
        let objective = fwd.breakdown.objective(&mut tape, 0.0);
        let grads = tape.backward(objective);
        let check = |name: &str, var: Var| {
            let g = grads
                .get(var)
                .unwrap_or_else(|| panic!("no gradient reached {name}"));
            assert!(
                g.iter().any(|&v| v != 0.0),
                "gradient at {name} is identically zero"
            );
        };
        check("pres_logit", fwd.fg_post.pres_logit);
        check("depth_mu", fwd.fg_post.depth_mu);
        check("depth_sigma", fwd.fg_post.depth_sigma);
        check("scale_mu", fwd.fg_post.scale_mu);
        check("scale_sigma", fwd.fg_post.scale_sigma);
        check("shift_mu", fwd.fg_post.shift_mu);
        check("shift_sigma", fwd.fg_post.shift_sigma);
        check("what_mu", fwd.fg_post.what_mu.unwrap());
        check("what_sigma", fwd.fg_post.what_sigma.unwrap());
        for (k, (mu, sigma)) in fwd
            .bg_post
            .mask_mu
            .iter()
            .zip(&fwd.bg_post.mask_sigma)
            .enumerate()
        {
            check(&format!("bg mask_mu[{k}]"), *mu);
            check(&format!("bg mask_sigma[{k}]"), *sigma);
        }
        for (k, (mu, sigma)) in fwd
            .bg_post
            .comp_mu
            .iter()
            .zip(&fwd.bg_post.comp_sigma)
            .enumerate()
        {
            check(&format!("bg comp_mu[{k}]"), *mu);
            check(&format!("bg comp_sigma[{k}]"), *sigma);
        }
    }

    /// Finite-difference check of the full objective with respect to raw
    /// parameters, on the toy model with fixed noise.
    #[test]
    fn end_to_end_parameter_gradients_spot_check() {
        let model = SceneModel::<f64>::new(ModelConfig::toy(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let images = ArrayD::from_shape_simple_fn(IxDyn(&[1, 3, 8, 8]), || rng.gen_range(0.0..1.0));
        let noise = ModelNoise::draw(&mut rng, 1, &model.config);
        let hp = StepHyper::plain();

        let eval_objective = |m: &SceneModel<f64>| -> f64 {
            let mut tape = Tape::new();
            let fwd = m.forward(&mut tape, &images, &hp, &noise).unwrap();
            let objective = fwd.breakdown.objective(&mut tape, 0.0);
            tape.scalar_value(objective)
        };

        // analytic gradients
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &images, &hp, &noise).unwrap();
        let objective = fwd.breakdown.objective(&mut tape, 0.0);
        let grads = tape.backward(objective);

        // a handful of parameters across both modules
        let mut model = model;
        let mut rng2 = ChaCha8Rng::seed_from_u64(99);
        let n_params = model.params.len();
        let mut checked = 0;
        let mut trials = 0;
        while checked < 10 && trials < 60 {
            trials += 1;
            let pid = crate::nn::ParamId(rng2.gen_range(0..n_params));
            let len = model.params.get(pid).len();
            let ei = rng2.gen_range(0..len);
            let analytic = grads
                .get(fwd.bound.var(pid))
                .map(|g| g.as_slice().unwrap()[ei])
                .unwrap_or(0.0);
            let eps = 1e-5;
            let orig = model.params.get(pid).as_slice().unwrap()[ei];
            model.params.get_mut(pid).as_slice_mut().unwrap()[ei] = orig + eps;
            let fp = eval_objective(&model);
            model.params.get_mut(pid).as_slice_mut().unwrap()[ei] = orig - eps;
            let fm = eval_objective(&model);
            model.params.get_mut(pid).as_slice_mut().unwrap()[ei] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let denom = analytic.abs().max(numeric.abs()).max(1e-4);
            assert!(
                (analytic - numeric).abs() / denom < 1e-3,
                "param {} [{ei}]: analytic {analytic:.6e} vs numeric {numeric:.6e}",
                model.params.name(pid)
            );
            checked += 1;
        }
        assert_eq!(checked, 10);
    }

    #[test]
    fn validate_rejects_bad_configs() {
        let mut c = ModelConfig::toy();
        c.grid = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.image_size = 6;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.k = 9;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.grid = 8;
        assert!(c.validate().is_err());
        assert!(ModelConfig::paper().validate().is_ok());
        assert!(ModelConfig::desk64(4, 3).validate().is_ok());
    }

    #[test]
    fn forward_rejects_wrong_batch_shape() {
        let model = SceneModel::<f64>::new(ModelConfig::toy(), 0).unwrap();
        let mut tape = Tape::new();
        let hp = StepHyper::plain();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise = ModelNoise::draw(&mut rng, 1, &model.config);
        let bad = ArrayD::zeros(IxDyn(&[1, 3, 16, 16]));
        assert!(model.forward(&mut tape, &bad, &hp, &noise).is_err());
    }
}
