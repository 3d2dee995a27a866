//! Two-optimizer training loop: RMSProp on the foreground parameters, Adam
//! on the background parameters, per-group gradient clipping, annealing
//! schedules, checkpointing, and JSON-lines metric logging.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::foreground::FgMode;
use crate::kvfile::KvFile;
use crate::model::{ModelConfig, ModelNoise, SceneModel, StepHyper};
use crate::nn::{ParamId, ParamStore};
use crate::objective::Schedule;
use crate::scalar::{sc, Scalar};
use crate::tensor::{require, Grads, Tape};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// The paper-scale step count; schedule compression rescales step-indexed
/// constants by `max_steps / 160000`.
pub const REFERENCE_STEPS: f64 = 160_000.0;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch: usize,
    pub fg_lr: f64,
    pub bg_lr: f64,
    pub grad_clip: f64,
    pub sigma_fg: f64,
    pub sigma_bg: f64,
    pub pres_prior: Schedule,
    pub scale_prior_mean: Schedule,
    pub scale_prior_std: f64,
    pub tau: Schedule,
    pub alpha_fix_steps: u64,
    pub alpha_fix_value: f64,
    pub boundary_loss: bool,
    pub boundary_off_step: u64,
    pub boundary_weight: f64,
    pub boundary_b: usize,
    pub schedule_compress: bool,
    pub max_steps: u64,
    pub log_interval: u64,
    pub eval_interval: u64,
    pub ckpt_interval: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::desk64(4, 3),
            batch: 16,
            fg_lr: 1e-5,
            bg_lr: 1e-3,
            grad_clip: 1.0,
            sigma_fg: 0.15,
            sigma_bg: 0.15,
            pres_prior: Schedule { start_value: 0.1, end_value: 0.01, start_step: 4000, end_step: 10000 },
            scale_prior_mean: Schedule { start_value: -1.0, end_value: -2.0, start_step: 10000, end_step: 20000 },
            scale_prior_std: 0.1,
            tau: Schedule { start_value: 2.5, end_value: 0.5, start_step: 0, end_step: 20000 },
            alpha_fix_steps: 0,
            alpha_fix_value: 0.1,
            boundary_loss: false,
            boundary_off_step: 100_000,
            boundary_weight: 1.0,
            boundary_b: 6,
            schedule_compress: false,
            max_steps: 20_000,
            log_interval: 50,
            eval_interval: 500,
            ckpt_interval: 2000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        require(self.batch >= 1, "batch must be >= 1")?;
        require(self.fg_lr > 0.0 && self.bg_lr > 0.0, "learning rates must be positive")?;
        require(self.grad_clip > 0.0, "grad_clip must be positive")?;
        require(self.sigma_fg > 0.0 && self.sigma_bg > 0.0, "mixture stdevs must be positive")?;
        require(self.scale_prior_std > 0.0, "scale prior stdev must be positive")?;
        require(self.max_steps >= 1, "max_steps must be >= 1")?;
        require(
            self.log_interval >= 1 && self.eval_interval >= 1 && self.ckpt_interval >= 1,
            "intervals must be >= 1",
        )?;
        require(
            (0.0..=1.0).contains(&self.alpha_fix_value),
            "alpha_fix_value must lie in [0,1]",
        )?;
        require(self.boundary_weight >= 0.0, "boundary weight must be >= 0")?;
        if self.boundary_loss {
            require(
                self.boundary_b > 0 && 2 * self.boundary_b < self.model.glimpse_size,
                "boundary_b out of range for the glimpse size",
            )?;
        }
        let tau_min = self.tau.start_value.min(self.tau.end_value);
        require(tau_min > 0.0, "temperature schedule must stay positive")?;
        let pp = [self.pres_prior.start_value, self.pres_prior.end_value];
        require(
            pp.iter().all(|&v| v > 0.0 && v < 1.0),
            "presence prior must stay strictly inside (0,1)",
        )?;
        Ok(())
    }

    /// Parse the flat key=value format; unknown keys are errors.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut kv = KvFile::parse(text)?;
        let mut c = TrainConfig::default();
        macro_rules! set {
            ($field:expr, $key:literal, $ty:ty) => {
                if let Some(v) = kv.take::<$ty>($key)? {
                    $field = v;
                }
            };
        }
        set!(c.model.image_size, "image_size", usize);
        set!(c.model.grid, "grid", usize);
        set!(c.model.k, "k", usize);
        set!(c.model.glimpse_size, "glimpse_size", usize);
        set!(c.model.what_dim, "what_dim", usize);
        set!(c.model.fg_base_ch, "fg_base_ch", usize);
        set!(c.model.fg_feat_ch, "fg_feat_ch", usize);
        set!(c.model.glimpse_base_ch, "glimpse_base_ch", usize);
        set!(c.model.glimpse_dec_ch, "glimpse_dec_ch", usize);
        set!(c.model.bg_latent_dim, "bg_latent_dim", usize);
        set!(c.model.bg_img_feat, "bg_img_feat", usize);
        set!(c.model.bg_enc_ch, "bg_enc_ch", usize);
        set!(c.model.mask_dec_ch, "mask_dec_ch", usize);
        set!(c.model.mask_dec_stride, "mask_dec_stride", usize);
        set!(c.model.comp_ch, "comp_ch", usize);
        set!(c.model.comp_dec_stride, "comp_dec_stride", usize);
        set!(c.model.lstm_hidden, "lstm_hidden", usize);
        set!(c.model.seq_proj_dim, "seq_proj_dim", usize);
        if let Some(v) = kv.take_bool("fg_extra_convs")? {
            c.model.fg_extra_convs = v;
        }
        if let Some(v) = kv.take_bool("fg_residual")? {
            c.model.fg_residual = v;
        }
        if let Some(v) = kv.take_bool("fg_norm")? {
            c.model.fg_norm = v;
        }
        if let Some(v) = kv.take_raw("mode") {
            c.model.mode = v.parse::<FgMode>()?;
        }
        set!(c.batch, "batch", usize);
        set!(c.fg_lr, "fg_lr", f64);
        set!(c.bg_lr, "bg_lr", f64);
        set!(c.grad_clip, "grad_clip", f64);
        set!(c.sigma_fg, "sigma_fg", f64);
        set!(c.sigma_bg, "sigma_bg", f64);
        if let Some(s) = kv.take_schedule("pres_prior")? {
            c.pres_prior = s;
        }
        if let Some(s) = kv.take_schedule("scale_prior_mean")? {
            c.scale_prior_mean = s;
        }
        set!(c.scale_prior_std, "scale_prior_std", f64);
        if let Some(s) = kv.take_schedule("tau")? {
            c.tau = s;
        }
        set!(c.alpha_fix_steps, "alpha_fix_steps", u64);
        set!(c.alpha_fix_value, "alpha_fix_value", f64);
        if let Some(v) = kv.take_bool("boundary_loss")? {
            c.boundary_loss = v;
        }
        set!(c.boundary_off_step, "boundary_off_step", u64);
        set!(c.boundary_weight, "boundary_weight", f64);
        set!(c.boundary_b, "boundary_b", usize);
        if let Some(v) = kv.take_bool("schedule_compress")? {
            c.schedule_compress = v;
        }
        set!(c.max_steps, "max_steps", u64);
        set!(c.log_interval, "log_interval", u64);
        set!(c.eval_interval, "eval_interval", u64);
        set!(c.ckpt_interval, "ckpt_interval", u64);
        set!(c.seed, "seed", u64);
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    fn compression(&self) -> f64 {
        if self.schedule_compress {
            self.max_steps as f64 / REFERENCE_STEPS
        } else {
            1.0
        }
    }

    /// Resolve every scheduled hyperparameter at a step.
    pub fn hyper_at(&self, step: u64) -> StepHyper {
        let f = self.compression();
        let pres = self.pres_prior.compress(f).value(step);
        let scale_mean = self.scale_prior_mean.compress(f).value(step);
        let tau = self.tau.compress(f).value(step);
        let alpha_steps = (self.alpha_fix_steps as f64 * f).round() as u64;
        let boundary_off = (self.boundary_off_step as f64 * f).round() as u64;
        StepHyper {
            tau,
            pres_prior: pres,
            scale_prior_mean: scale_mean,
            scale_prior_std: self.scale_prior_std,
            sigma_fg: self.sigma_fg,
            sigma_bg: self.sigma_bg,
            alpha_fix: (step < alpha_steps).then_some(self.alpha_fix_value),
            boundary: (self.boundary_loss && step < boundary_off)
                .then_some((self.boundary_b, self.boundary_weight)),
        }
    }
}

/// One JSON line per log interval.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub elbo: f64,
    pub loglik: f64,
    pub kl_fg: f64,
    pub kl_bg: f64,
    pub boundary: f64,
    pub mse: f64,
    pub wall_time_s: f64,
}

/// Held-out reconstruction error, written on the eval cadence.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValRecord {
    pub step: u64,
    pub mse: f64,
}

struct RmsProp<S: Scalar> {
    lr: f64,
    alpha: f64,
    eps: f64,
    sq: Vec<ArrayD<S>>,
}

impl<S: Scalar> RmsProp<S> {
    fn new(lr: f64, params: &ParamStore<S>, ids: &[ParamId]) -> Self {
        RmsProp {
            lr,
            alpha: 0.99,
            eps: 1e-8,
            sq: ids.iter().map(|&id| ArrayD::zeros(params.get(id).raw_dim())).collect(),
        }
    }

    fn step(&mut self, params: &mut ParamStore<S>, ids: &[ParamId], grads: &[Option<ArrayD<S>>]) {
        let a = sc::<S>(self.alpha);
        let one_m_a = sc::<S>(1.0 - self.alpha);
        let lr = sc::<S>(self.lr);
        let eps = sc::<S>(self.eps);
        for (slot, (&id, grad)) in ids.iter().zip(grads).enumerate() {
            let Some(g) = grad else { continue };
            let sq = &mut self.sq[slot];
            ndarray::Zip::from(&mut *sq).and(g).for_each(|s, &gi| *s = a * *s + one_m_a * gi * gi);
            let p = params.get_mut(id);
            ndarray::Zip::from(p).and(&*sq).and(g).for_each(|pi, &si, &gi| {
                *pi -= lr * gi / (si.sqrt() + eps);
            });
        }
    }
}

struct Adam<S: Scalar> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<ArrayD<S>>,
    v: Vec<ArrayD<S>>,
}

impl<S: Scalar> Adam<S> {
    fn new(lr: f64, params: &ParamStore<S>, ids: &[ParamId]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: ids.iter().map(|&id| ArrayD::zeros(params.get(id).raw_dim())).collect(),
            v: ids.iter().map(|&id| ArrayD::zeros(params.get(id).raw_dim())).collect(),
        }
    }

    fn step(&mut self, params: &mut ParamStore<S>, ids: &[ParamId], grads: &[Option<ArrayD<S>>]) {
        self.t += 1;
        let b1 = sc::<S>(self.beta1);
        let b2 = sc::<S>(self.beta2);
        let omb1 = sc::<S>(1.0 - self.beta1);
        let omb2 = sc::<S>(1.0 - self.beta2);
        let bc1 = sc::<S>(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = sc::<S>(1.0 - self.beta2.powi(self.t as i32));
        let lr = sc::<S>(self.lr);
        let eps = sc::<S>(self.eps);
        for (slot, (&id, grad)) in ids.iter().zip(grads).enumerate() {
            let Some(g) = grad else { continue };
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            ndarray::Zip::from(&mut *m).and(g).for_each(|mi, &gi| *mi = b1 * *mi + omb1 * gi);
            ndarray::Zip::from(&mut *v).and(g).for_each(|vi, &gi| *vi = b2 * *vi + omb2 * gi * gi);
            let p = params.get_mut(id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|pi, &mi, &vi| {
                let mh = mi / bc1;
                let vh = vi / bc2;
                *pi -= lr * mh / (vh.sqrt() + eps);
            });
        }
    }
}

/// Scale a group's gradients so their global norm is at most `max_norm`.
/// Returns the post-clip norm.
fn clip_group<S: Scalar>(grads: &mut [Option<ArrayD<S>>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter().flatten() {
        for &v in g.iter() {
            let f = v.as_f64();
            sq += f * f;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = sc::<S>(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * scale);
        }
        max_norm
    } else {
        norm
    }
}

/// Foreground/background parameter split by name prefix; asserts the
/// partition covers every parameter exactly once.
pub fn partition_params<S: Scalar>(params: &ParamStore<S>) -> Result<(Vec<ParamId>, Vec<ParamId>)> {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for id in params.ids() {
        let name = params.name(id);
        match (name.starts_with("fg."), name.starts_with("bg.")) {
            (true, false) => fg.push(id),
            (false, true) => bg.push(id),
            _ => {
                return Err(Error::Config(format!(
                    "parameter `{name}` belongs to no optimizer group"
                )))
            }
        }
    }
    require(fg.len() + bg.len() == params.len(), "optimizer groups must partition the parameters")?;
    Ok((fg, bg))
}

fn collect_group<S: Scalar>(
    grads: &mut Grads<S>,
    bound: &crate::nn::Bound,
    ids: &[ParamId],
) -> Vec<Option<ArrayD<S>>> {
    ids.iter().map(|&id| grads.take(bound.var(id))).collect()
}

// ---- checkpointing ----

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    step: u64,
    config: TrainConfig,
    rng_seed: [u8; 32],
    rng_word_pos: (u64, u64),
    param_shapes: Vec<(String, Vec<usize>)>,
    adam_t: u64,
}

/// Restored training state.
pub struct Checkpoint {
    pub step: u64,
    pub config: TrainConfig,
    pub rng: ChaCha8Rng,
    params: Vec<(String, ArrayD<f64>)>,
    fg_sq: Vec<ArrayD<f64>>,
    adam_m: Vec<ArrayD<f64>>,
    adam_v: Vec<ArrayD<f64>>,
    adam_t: u64,
}

fn write_array<S: Scalar, W: Write>(w: &mut W, a: &ArrayD<S>) -> std::io::Result<()> {
    for &v in a.iter() {
        w.write_f64::<LittleEndian>(v.as_f64())?;
    }
    Ok(())
}

fn read_array<R: Read>(r: &mut R, shape: &[usize]) -> std::io::Result<ArrayD<f64>> {
    let n: usize = shape.iter().product();
    let mut data = vec![0f64; n];
    r.read_f64_into::<LittleEndian>(&mut data)?;
    Ok(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches length"))
}

struct TrainState<S: Scalar> {
    model: SceneModel<S>,
    fg_ids: Vec<ParamId>,
    bg_ids: Vec<ParamId>,
    rmsprop: RmsProp<S>,
    adam: Adam<S>,
    rng: ChaCha8Rng,
    step: u64,
}

impl<S: Scalar> TrainState<S> {
    fn fresh(config: &TrainConfig) -> Result<Self> {
        let model = SceneModel::<S>::new(config.model.clone(), config.seed)?;
        let (fg_ids, bg_ids) = partition_params(&model.params)?;
        let rmsprop = RmsProp::new(config.fg_lr, &model.params, &fg_ids);
        let adam = Adam::new(config.bg_lr, &model.params, &bg_ids);
        // offset so data sampling (seeded per step) and noise draws differ
        let rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5ce0_1d2a));
        Ok(TrainState { model, fg_ids, bg_ids, rmsprop, adam, rng, step: 0 })
    }

    fn save(&self, config: &TrainConfig, path: &Path) -> Result<()> {
        let params = &self.model.params;
        let header = CheckpointHeader {
            step: self.step,
            config: config.clone(),
            rng_seed: self.rng.get_seed(),
            rng_word_pos: {
                let wp = self.rng.get_word_pos();
                ((wp & u128::from(u64::MAX)) as u64, (wp >> 64) as u64)
            },
            param_shapes: params
                .ids()
                .map(|id| (params.name(id).to_string(), params.get(id).shape().to_vec()))
                .collect(),
            adam_t: self.adam.t,
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");
        let tmp = path.with_extension("tmp");
        let mut w = std::io::BufWriter::new(
            std::fs::File::create(&tmp).map_err(|e| Error::io(tmp.display().to_string(), e))?,
        );
        let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
        w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION).map_err(io_err)?;
        w.write_u64::<LittleEndian>(header_json.len() as u64).map_err(io_err)?;
        w.write_all(&header_json).map_err(io_err)?;
        for id in params.ids() {
            write_array(&mut w, params.get(id)).map_err(io_err)?;
        }
        for a in &self.rmsprop.sq {
            write_array(&mut w, a).map_err(io_err)?;
        }
        for a in &self.adam.m {
            write_array(&mut w, a).map_err(io_err)?;
        }
        for a in &self.adam.v {
            write_array(&mut w, a).map_err(io_err)?;
        }
        w.into_inner()
            .map_err(|e| Error::io(tmp.display().to_string(), e.into_error()))?
            .sync_all()
            .map_err(io_err)?;
        std::fs::rename(&tmp, path).map_err(io_err)?;
        Ok(())
    }

    fn restore(config: &TrainConfig, ckpt: Checkpoint) -> Result<Self> {
        if ckpt.config.model != config.model {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint model (grid {}, K {}, image {}) does not match the requested \
                 configuration (grid {}, K {}, image {})",
                ckpt.config.model.grid,
                ckpt.config.model.k,
                ckpt.config.model.image_size,
                config.model.grid,
                config.model.k,
                config.model.image_size,
            )));
        }
        let mut state = TrainState::<S>::fresh(config)?;
        let params = &mut state.model.params;
        require(
            ckpt.params.len() == params.len(),
            "checkpoint parameter count does not match the model",
        )?;
        for (id, (name, data)) in params.ids().collect::<Vec<_>>().into_iter().zip(&ckpt.params) {
            require(
                params.name(id) == name && params.get(id).shape() == data.shape(),
                format!("checkpoint parameter `{name}` does not match the model"),
            )?;
            *params.get_mut(id) = data.mapv(|v| sc::<S>(v));
        }
        for (dst, src) in state.rmsprop.sq.iter_mut().zip(&ckpt.fg_sq) {
            *dst = src.mapv(|v| sc::<S>(v));
        }
        for (dst, src) in state.adam.m.iter_mut().zip(&ckpt.adam_m) {
            *dst = src.mapv(|v| sc::<S>(v));
        }
        for (dst, src) in state.adam.v.iter_mut().zip(&ckpt.adam_v) {
            *dst = src.mapv(|v| sc::<S>(v));
        }
        state.adam.t = ckpt.adam_t;
        state.rng = ckpt.rng;
        state.step = ckpt.step;
        Ok(state)
    }
}

/// Read a checkpoint container; refuses version mismatches and truncation.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
    let mut r = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::DataIntegrity(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io_err)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let hlen = r.read_u64::<LittleEndian>().map_err(io_err)? as usize;
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf).map_err(io_err)?;
    let header: CheckpointHeader = serde_json::from_slice(&hbuf)
        .map_err(|e| Error::DataIntegrity(format!("bad checkpoint header: {e}")))?;

    let mut params = Vec::with_capacity(header.param_shapes.len());
    for (name, shape) in &header.param_shapes {
        params.push((name.clone(), read_array(&mut r, shape).map_err(io_err)?));
    }
    let fg_shapes: Vec<_> =
        header.param_shapes.iter().filter(|(n, _)| n.starts_with("fg.")).collect();
    let bg_shapes: Vec<_> =
        header.param_shapes.iter().filter(|(n, _)| n.starts_with("bg.")).collect();
    let mut fg_sq = Vec::new();
    for (_, shape) in &fg_shapes {
        fg_sq.push(read_array(&mut r, shape).map_err(io_err)?);
    }
    let mut adam_m = Vec::new();
    for (_, shape) in &bg_shapes {
        adam_m.push(read_array(&mut r, shape).map_err(io_err)?);
    }
    let mut adam_v = Vec::new();
    for (_, shape) in &bg_shapes {
        adam_v.push(read_array(&mut r, shape).map_err(io_err)?);
    }
    let mut rng = ChaCha8Rng::from_seed(header.rng_seed);
    rng.set_word_pos(u128::from(header.rng_word_pos.1) << 64 | u128::from(header.rng_word_pos.0));
    Ok(Checkpoint {
        step: header.step,
        config: header.config,
        rng,
        params,
        fg_sq,
        adam_m,
        adam_v,
        adam_t: header.adam_t,
    })
}

/// Deterministic batch indices for a step (stateless in the rng).
fn batch_indices(seed: u64, step: u64, len: usize, batch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_mul(0x2545_f491_4f6c_dd1d));
    (0..batch).map(|_| rng.gen_range(0..len)).collect()
}

/// Mean squared error of the composited reconstruction over a fixed subset,
/// using posterior means (zero noise).
pub fn held_out_mse<S: Scalar>(
    model: &SceneModel<S>,
    data: &Dataset,
    hp: &StepHyper,
    limit: usize,
    batch: usize,
) -> Result<f64> {
    let n = data.len().min(limit);
    let mut total = 0.0;
    let mut count = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let images = data.batch::<S>(&idx);
        let mut tape = Tape::new();
        let noise = ModelNoise::zeros(idx.len(), &model.config);
        let fwd = model.forward(&mut tape, &images, hp, &noise)?;
        let recon = tape.val(fwd.recon);
        let mut sq = 0.0;
        for (a, b) in recon.iter().zip(images.iter()) {
            let d = a.as_f64() - b.as_f64();
            sq += d * d;
        }
        total += sq;
        count += images.len();
        start = end;
    }
    Ok(total / count as f64)
}

pub struct TrainOutcome {
    pub final_step: u64,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
}

/// Snapshot handed to the stop callback on the eval cadence.
pub struct EvalCtx<'a, S: Scalar> {
    pub step: u64,
    pub val_mse: f64,
    pub model: &'a SceneModel<S>,
}

/// Stop-condition callback; return true to stop early.
pub type StopCheck<'a, S> = dyn FnMut(&EvalCtx<'_, S>) -> bool + 'a;

pub fn train<S: Scalar>(
    config: &TrainConfig,
    data_root: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    train_with_stop::<S>(config, data_root, out_dir, resume, &mut |_| false)
}

pub fn train_with_stop<S: Scalar>(
    config: &TrainConfig,
    data_root: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
    stop: &mut StopCheck<'_, S>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let train_data = load_dataset(data_root, "train")?;
    let val_data = load_dataset(data_root, "val").ok();
    require(
        train_data.image_size == config.model.image_size,
        format!(
            "dataset images are {}px but the model expects {}px",
            train_data.image_size, config.model.image_size
        ),
    )?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let mut state = match resume {
        Some(path) => TrainState::<S>::restore(config, load_checkpoint(path)?)?,
        None => TrainState::<S>::fresh(config)?,
    };

    let metrics_path = out_dir.join("metrics.jsonl");
    let val_path = out_dir.join("val_metrics.jsonl");
    let mut metrics = std::io::BufWriter::new(
        std::fs::File::options()
            .create(true)
            .append(true)
            .open(&metrics_path)
            .map_err(|e| Error::io(metrics_path.display().to_string(), e))?,
    );
    let mut val_metrics = std::io::BufWriter::new(
        std::fs::File::options()
            .create(true)
            .append(true)
            .open(&val_path)
            .map_err(|e| Error::io(val_path.display().to_string(), e))?,
    );

    let t0 = Instant::now();
    let mut ckpt_path = out_dir.join("final.ckpt");
    while state.step < config.max_steps {
        let step = state.step + 1;
        let hp = config.hyper_at(state.step);
        let idx = batch_indices(config.seed, step, train_data.len(), config.batch);
        let images = train_data.batch::<S>(&idx);
        let noise = ModelNoise::draw(&mut state.rng, config.batch, &config.model);

        let mut tape = Tape::new();
        let fwd = state.model.forward(&mut tape, &images, &hp, &noise)?;
        let lambda = hp.boundary.map(|(_, w)| w).unwrap_or(0.0);
        let objective = fwd.breakdown.objective(&mut tape, lambda);

        let loss = tape.scalar_value(objective).as_f64();
        if !loss.is_finite() {
            let detail = format!(
                "objective {loss}; loglik {} kl_fg {} kl_bg {} boundary {}; batch indices {idx:?}",
                tape.scalar_value(fwd.breakdown.log_likelihood).as_f64(),
                tape.scalar_value(fwd.breakdown.kl_fg).as_f64(),
                tape.scalar_value(fwd.breakdown.kl_bg).as_f64(),
                tape.scalar_value(fwd.breakdown.boundary).as_f64(),
            );
            return Err(Error::NonFinite { step, detail });
        }

        let elbo_v = tape.scalar_value(fwd.breakdown.total).as_f64();
        let loglik_v = tape.scalar_value(fwd.breakdown.log_likelihood).as_f64();
        let kl_fg_v = tape.scalar_value(fwd.breakdown.kl_fg).as_f64();
        let kl_bg_v = tape.scalar_value(fwd.breakdown.kl_bg).as_f64();
        let boundary_v = tape.scalar_value(fwd.breakdown.boundary).as_f64();
        let mse_v = {
            let recon = tape.val(fwd.recon);
            let mut sq = 0.0;
            for (a, b) in recon.iter().zip(images.iter()) {
                let d = a.as_f64() - b.as_f64();
                sq += d * d;
            }
            sq / images.len() as f64
        };

        let mut grads = tape.backward(objective);
        let mut fg_grads = collect_group(&mut grads, &fwd.bound, &state.fg_ids);
        let mut bg_grads = collect_group(&mut grads, &fwd.bound, &state.bg_ids);
        let fg_norm = clip_group(&mut fg_grads, config.grad_clip);
        let bg_norm = clip_group(&mut bg_grads, config.grad_clip);
        debug_assert!(fg_norm <= config.grad_clip + 1e-6);
        debug_assert!(bg_norm <= config.grad_clip + 1e-6);
        state.rmsprop.step(&mut state.model.params, &state.fg_ids, &fg_grads);
        state.adam.step(&mut state.model.params, &state.bg_ids, &bg_grads);
        state.step = step;

        if step % config.log_interval == 0 || step == config.max_steps {
            let rec = MetricsRecord {
                step,
                elbo: elbo_v,
                loglik: loglik_v,
                kl_fg: kl_fg_v,
                kl_bg: kl_bg_v,
                boundary: boundary_v,
                mse: mse_v,
                wall_time_s: t0.elapsed().as_secs_f64(),
            };
            let line = serde_json::to_string(&rec).expect("metrics serialize");
            writeln!(metrics, "{line}")
                .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
            metrics.flush().map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
        }

        let mut stop_now = false;
        if step % config.eval_interval == 0 || step == config.max_steps {
            if let Some(val) = &val_data {
                let vmse = held_out_mse(&state.model, val, &hp, 256, config.batch)?;
                let line = serde_json::to_string(&ValRecord { step, mse: vmse })
                    .expect("val metrics serialize");
                writeln!(val_metrics, "{line}")
                    .map_err(|e| Error::io(val_path.display().to_string(), e))?;
                val_metrics
                    .flush()
                    .map_err(|e| Error::io(val_path.display().to_string(), e))?;
                stop_now = stop(&EvalCtx { step, val_mse: vmse, model: &state.model });
            }
        }

        if step % config.ckpt_interval == 0 || step == config.max_steps || stop_now {
            let path = out_dir.join(format!("step{step:07}.ckpt"));
            state.save(config, &path)?;
            ckpt_path = out_dir.join("final.ckpt");
            std::fs::copy(&path, &ckpt_path)
                .map_err(|e| Error::io(ckpt_path.display().to_string(), e))?;
        }
        if stop_now {
            break;
        }
    }
    // always leave a final checkpoint, even for short runs
    if !ckpt_path.is_file() {
        state.save(config, &ckpt_path)?;
    }
    Ok(TrainOutcome { final_step: state.step, checkpoint_path: ckpt_path, metrics_path })
}

/// Rebuild a model from a checkpoint (for evaluation and visualization).
pub fn model_from_checkpoint<S: Scalar>(ckpt: &Checkpoint) -> Result<SceneModel<S>> {
    let mut model = SceneModel::<S>::new(ckpt.config.model.clone(), ckpt.config.seed)?;
    require(
        ckpt.params.len() == model.params.len(),
        "checkpoint parameter count does not match the model",
    )?;
    let ids: Vec<ParamId> = model.params.ids().collect();
    for (id, (name, data)) in ids.into_iter().zip(&ckpt.params) {
        require(
            model.params.name(id) == name && model.params.get(id).shape() == data.shape(),
            format!("checkpoint parameter `{name}` does not match the model"),
        )?;
        *model.params.get_mut(id) = data.mapv(|v| sc::<S>(v));
    }
    Ok(model)
}
