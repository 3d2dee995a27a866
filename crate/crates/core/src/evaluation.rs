//! Detection metrics (average precision, count error rate), reconstruction
//! error, and the parallel-vs-sequential gradient-step latency benchmark.

use std::path::Path;
use std::time::Instant;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::foreground::FgMode;
use crate::model::{ModelConfig, ModelNoise, SceneModel, StepHyper};
use crate::nn::ParamId;
use crate::scalar::Scalar;
use crate::tensor::{require, Tape};
use crate::training::TrainConfig;

/// One predicted box in pixel coordinates with its presence probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: [f64; 4],
    pub confidence: f64,
}

/// Convert per-cell presence probabilities and derived boxes into pixel
/// detections: cells with hard presence (probability >= `threshold`) yield
/// one detection each, clipped to the image and sorted by confidence.
pub fn extract_detections<S: Scalar>(
    pres_prob: &ArrayD<S>,
    boxes: &ArrayD<S>,
    image_size: usize,
    threshold: f64,
) -> Vec<Vec<Detection>> {
    let (b, g) = (pres_prob.shape()[0], pres_prob.shape()[1]);
    let s = image_size as f64;
    let mut out = Vec::with_capacity(b);
    for n in 0..b {
        let mut dets = Vec::new();
        for i in 0..g {
            let rho = pres_prob[[n, i]].as_f64();
            if rho < threshold {
                continue;
            }
            let m = n * g + i;
            let (sx, sy, tx, ty) = (
                boxes[[m, 0]].as_f64(),
                boxes[[m, 1]].as_f64(),
                boxes[[m, 2]].as_f64(),
                boxes[[m, 3]].as_f64(),
            );
            let cx = (tx + 1.0) / 2.0 * s;
            let cy = (ty + 1.0) / 2.0 * s;
            let (hx, hy) = (sx / 2.0 * s, sy / 2.0 * s);
            let bbox = [
                (cx - hx).clamp(0.0, s),
                (cy - hy).clamp(0.0, s),
                (cx + hx).clamp(0.0, s),
                (cy + hy).clamp(0.0, s),
            ];
            dets.push(Detection { bbox, confidence: rho });
        }
        dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        out.push(dets);
    }
    out
}

/// Intersection over union; any degenerate (zero-area) box scores 0.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let area = |r: [f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let (aa, ab) = (area(a), area(b));
    if aa <= 0.0 || ab <= 0.0 {
        return 0.0;
    }
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    inter / (aa + ab - inter)
}

/// Single-class average precision at one IoU threshold: global confidence
/// ranking, greedy matching to the highest-IoU unmatched ground truth, and
/// all-points interpolation of the precision-recall curve.
pub fn average_precision(
    detections: &[Vec<Detection>],
    ground_truths: &[Vec<[f64; 4]>],
    iou_threshold: f64,
) -> f64 {
    assert_eq!(detections.len(), ground_truths.len());
    let n_gt: usize = ground_truths.iter().map(|g| g.len()).sum();
    if n_gt == 0 {
        return 0.0;
    }
    // (confidence, image, det index) ranked globally; ties keep stable order
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    for (img, dets) in detections.iter().enumerate() {
        for (di, d) in dets.iter().enumerate() {
            ranked.push((d.confidence, img, di));
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut matched: Vec<Vec<bool>> = ground_truths.iter().map(|g| vec![false; g.len()]).collect();
    let mut tps = Vec::with_capacity(ranked.len());
    for (_, img, di) in &ranked {
        let det = &detections[*img][*di];
        let mut best = -1.0;
        let mut best_gt = None;
        for (gi, gt) in ground_truths[*img].iter().enumerate() {
            if matched[*img][gi] {
                continue;
            }
            let v = iou(det.bbox, *gt);
            if v > best {
                best = v;
                best_gt = Some(gi);
            }
        }
        if best >= iou_threshold {
            matched[*img][best_gt.expect("match found")] = true;
            tps.push(true);
        } else {
            tps.push(false);
        }
    }

    // precision-recall points, then the right-to-left precision envelope
    let mut tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(tps.len());
    for (rank, &is_tp) in tps.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        let precision = tp as f64 / (rank + 1) as f64;
        let recall = tp as f64 / n_gt as f64;
        points.push((recall, precision));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < points.len() {
        let r = points[i].0;
        let max_p = points[i..].iter().map(|p| p.1).fold(0.0, f64::max);
        if r > prev_recall {
            ap += (r - prev_recall) * max_p;
            prev_recall = r;
        }
        i += 1;
    }
    ap
}

/// Mean AP over IoU thresholds 0.5, 0.55, ..., 0.95.
pub fn average_precision_range(
    detections: &[Vec<Detection>],
    ground_truths: &[Vec<[f64; 4]>],
) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..10 {
        let thr = 0.5 + 0.05 * i as f64;
        total += average_precision(detections, ground_truths, thr);
        count += 1;
    }
    total / count as f64
}

/// Micro-averaged absolute count error: sum |N_pred - N_true| / sum N_true.
pub fn count_error_rate(
    detections: &[Vec<Detection>],
    ground_truths: &[Vec<[f64; 4]>],
) -> Result<f64> {
    require(detections.len() == ground_truths.len(), "evaluation sets must align")?;
    let n_true: usize = ground_truths.iter().map(|g| g.len()).sum();
    require(n_true > 0, "count error rate is undefined with no ground-truth objects")?;
    let num: f64 = detections
        .iter()
        .zip(ground_truths)
        .map(|(d, g)| (d.len() as f64 - g.len() as f64).abs())
        .sum();
    Ok(num / n_true as f64)
}

/// Mean squared error over pixels, channels, and images.
pub fn pixel_mse<S: Scalar>(x: &ArrayD<S>, reconstruction: &ArrayD<S>) -> Result<f64> {
    require(
        x.shape() == reconstruction.shape(),
        format!("shape mismatch {:?} vs {:?}", x.shape(), reconstruction.shape()),
    )?;
    let mut sq = 0.0;
    for (a, b) in x.iter().zip(reconstruction.iter()) {
        let d = a.as_f64() - b.as_f64();
        sq += d * d;
    }
    Ok(sq / x.len() as f64)
}

/// Metric report for one evaluation run; box metrics are absent when the
/// dataset carries no annotations.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub ap50: Option<f64>,
    pub ap5095: Option<f64>,
    pub count_error_rate: Option<f64>,
    pub mse: f64,
    pub n_images: usize,
}

/// Run posterior-mean inference over a dataset split and compute the report.
pub fn evaluate_model<S: Scalar>(
    model: &SceneModel<S>,
    data: &Dataset,
    hp: &StepHyper,
    batch: usize,
    threshold: f64,
) -> Result<MetricReport> {
    require(!data.is_empty(), "evaluation set is empty")?;
    let mut detections: Vec<Vec<Detection>> = Vec::with_capacity(data.len());
    let mut mse_total = 0.0;
    let mut mse_count = 0usize;
    let mut start = 0;
    while start < data.len() {
        let end = (start + batch).min(data.len());
        let idx: Vec<usize> = (start..end).collect();
        let images = data.batch::<S>(&idx);
        let mut tape = Tape::new();
        let noise = ModelNoise::zeros(idx.len(), &model.config);
        let fwd = model.forward(&mut tape, &images, hp, &noise)?;
        let pres = tape.val(fwd.fg_post.pres_prob).to_owned();
        let boxes = tape.val(fwd.fg_sample.boxes).to_owned();
        detections.extend(extract_detections(&pres, &boxes, model.config.image_size, threshold));
        let recon = tape.val(fwd.recon).to_owned();
        mse_total += pixel_mse(&images, &recon)? * images.len() as f64;
        mse_count += images.len();
        start = end;
    }
    let mse = mse_total / mse_count as f64;

    let has_annotations = data.annotations.iter().any(|a| !a.objects.is_empty());
    if !has_annotations {
        return Ok(MetricReport {
            ap50: None,
            ap5095: None,
            count_error_rate: None,
            mse,
            n_images: data.len(),
        });
    }
    let gts: Vec<Vec<[f64; 4]>> = data
        .annotations
        .iter()
        .map(|a| a.objects.iter().map(|o| o.bbox).collect())
        .collect();
    Ok(MetricReport {
        ap50: Some(average_precision(&detections, &gts, 0.5)),
        ap5095: Some(average_precision_range(&detections, &gts)),
        count_error_rate: Some(count_error_rate(&detections, &gts)?),
        mse,
        n_images: data.len(),
    })
}

/// Latency of one full gradient step for a (grid, mode) combination.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub grid: usize,
    pub mode: String,
    pub k: usize,
    pub batch: usize,
    pub mean_s: f64,
    pub std_s: f64,
    /// decomposition capacity: grid cells plus background components
    pub capacity: usize,
}

#[derive(Clone, Debug)]
pub struct BenchmarkConfig {
    pub image_size: usize,
    pub k: usize,
    pub batch: usize,
    pub warmup_steps: usize,
    pub timed_steps: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            image_size: 64,
            k: 3,
            batch: 8,
            warmup_steps: 5,
            timed_steps: 20,
            seed: 0,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        require(self.warmup_steps >= 1, "need at least one warmup step")?;
        require(self.timed_steps >= 2, "need at least two timed steps")?;
        Ok(())
    }

    /// Benchmark-sized model: small glimpse pipeline so the per-cell cost is
    /// dominated by the serialization structure under test, not by network
    /// width.
    fn model_config(&self, grid: usize, mode: FgMode) -> ModelConfig {
        let mut cfg = ModelConfig::desk64(grid, self.k);
        cfg.image_size = self.image_size;
        cfg.glimpse_size = 8;
        cfg.what_dim = 8;
        cfg.fg_base_ch = 16;
        cfg.fg_feat_ch = 32;
        cfg.glimpse_base_ch = 8;
        cfg.glimpse_dec_ch = 16;
        cfg.mask_dec_ch = 32;
        cfg.comp_ch = 16;
        cfg.mode = mode;
        cfg
    }
}

/// Time full gradient steps (forward, backward, clip, update) on synthetic
/// batches for every requested (grid, mode) pair.
pub fn benchmark_latency(
    grids: &[usize],
    modes: &[FgMode],
    cfg: &BenchmarkConfig,
) -> Result<Vec<LatencyRecord>> {
    cfg.validate()?;
    let mut records = Vec::new();
    for &grid in grids {
        for &mode in modes {
            let model_cfg = cfg.model_config(grid, mode);
            model_cfg.validate()?;
            let model = SceneModel::<f32>::new(model_cfg.clone(), cfg.seed)?;
            let (fg_ids, bg_ids) = crate::training::partition_params(&model.params)?;
            let mut model = model;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xb0_0b);
            let images: ArrayD<f32> = ArrayD::from_shape_simple_fn(
                IxDyn(&[cfg.batch, 3, cfg.image_size, cfg.image_size]),
                || rng.gen_range(0.0..1.0),
            );
            let hp = StepHyper::plain();
            let mut times = Vec::with_capacity(cfg.timed_steps);
            for it in 0..cfg.warmup_steps + cfg.timed_steps {
                let start = Instant::now();
                gradient_step(&mut model, &images, &hp, &fg_ids, &bg_ids, &mut rng)?;
                let dt = start.elapsed().as_secs_f64();
                if it >= cfg.warmup_steps {
                    times.push(dt);
                }
            }
            let mean = times.iter().sum::<f64>() / times.len() as f64;
            let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>()
                / (times.len() - 1) as f64;
            records.push(LatencyRecord {
                grid,
                mode: mode.to_string(),
                k: cfg.k,
                batch: cfg.batch,
                mean_s: mean,
                std_s: var.sqrt(),
                capacity: grid * grid + cfg.k,
            });
        }
    }
    Ok(records)
}

fn gradient_step(
    model: &mut SceneModel<f32>,
    images: &ArrayD<f32>,
    hp: &StepHyper,
    fg_ids: &[ParamId],
    bg_ids: &[ParamId],
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let noise = ModelNoise::draw(rng, images.shape()[0], &model.config);
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, images, hp, &noise)?;
    let objective = fwd.breakdown.objective(&mut tape, 0.0);
    let mut grads = tape.backward(objective);
    // plain SGD update stands in for the optimizers; the timing target is
    // forward + backward + update, not optimizer arithmetic
    for ids in [fg_ids, bg_ids] {
        for &id in ids {
            if let Some(g) = grads.take(fwd.bound.var(id)) {
                let p = model.params.get_mut(id);
                ndarray::Zip::from(p).and(&g).for_each(|pi, &gi| *pi -= 1e-6 * gi);
            }
        }
    }
    Ok(())
}

/// Write benchmark records as CSV with the canonical header.
pub fn write_latency_csv(records: &[LatencyRecord], path: &Path) -> Result<()> {
    let mut body = String::from("grid,mode,K,batch,mean_s,std_s,capacity\n");
    for r in records {
        body.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{}\n",
            r.grid, r.mode, r.k, r.batch, r.mean_s, r.std_s, r.capacity
        ));
    }
    std::fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Resolved evaluation-time hyperparameters: end-of-schedule values.
pub fn eval_hyper(config: &TrainConfig) -> StepHyper {
    let mut hp = config.hyper_at(config.max_steps);
    hp.alpha_fix = None;
    hp.boundary = None;
    hp
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(bbox: [f64; 4], confidence: f64) -> Detection {
        Detection { bbox, confidence }
    }

    #[test]
    fn iou_closed_forms() {
        assert_eq!(iou([0.0, 0.0, 2.0, 2.0], [0.0, 0.0, 2.0, 2.0]), 1.0);
        assert_eq!(iou([0.0, 0.0, 1.0, 1.0], [2.0, 2.0, 3.0, 3.0]), 0.0);
        // unit squares offset by half in one axis: 0.5 / (2 - 0.5) = 1/3
        let v = iou([0.0, 0.0, 1.0, 1.0], [0.5, 0.0, 1.5, 1.0]);
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou([0.0, 0.0, 0.0, 1.0], [0.0, 0.0, 1.0, 1.0]), 0.0);
    }

    #[test]
    fn ap_perfect_and_empty() {
        let gts = vec![vec![[0.0, 0.0, 2.0, 2.0]], vec![[1.0, 1.0, 3.0, 3.0]]];
        let dets = vec![
            vec![det([0.0, 0.0, 2.0, 2.0], 0.9)],
            vec![det([1.0, 1.0, 3.0, 3.0], 0.8)],
        ];
        assert_eq!(average_precision(&dets, &gts, 0.5), 1.0);
        let none = vec![Vec::new(), Vec::new()];
        assert_eq!(average_precision(&none, &gts, 0.5), 0.0);
    }

    #[test]
    fn ap_hand_computed_case() {
        // 1 image, 2 ground truths; detections at confidences 0.9 (hit),
        // 0.8 (miss), 0.7 (hit): AP = 1.0 * 0.5 + (2/3) * 0.5 = 0.8333...
        let gts = vec![vec![[0.0, 0.0, 2.0, 2.0], [5.0, 5.0, 7.0, 7.0]]];
        let dets = vec![vec![
            det([0.0, 0.0, 2.0, 2.0], 0.9),
            det([10.0, 10.0, 12.0, 12.0], 0.8),
            det([5.0, 5.0, 7.0, 7.0], 0.7),
        ]];
        let ap = average_precision(&dets, &gts, 0.5);
        assert!((ap - 5.0 / 6.0).abs() < 1e-9, "ap {ap}");
    }

    #[test]
    fn ap_invariant_under_monotone_confidence_maps() {
        let gts = vec![vec![[0.0, 0.0, 2.0, 2.0], [5.0, 5.0, 7.0, 7.0]], vec![[1.0, 1.0, 2.0, 2.0]]];
        let dets = vec![
            vec![det([0.1, 0.0, 2.0, 2.0], 0.9), det([4.9, 5.0, 7.0, 7.1], 0.4)],
            vec![det([0.0, 0.0, 3.0, 3.0], 0.6)],
        ];
        let a = average_precision(&dets, &gts, 0.5);
        let squashed: Vec<Vec<Detection>> = dets
            .iter()
            .map(|v| {
                v.iter()
                    .map(|d| det(d.bbox, d.confidence.powi(3) / 2.0))
                    .collect()
            })
            .collect();
        let b = average_precision(&squashed, &gts, 0.5);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn ap_non_increasing_in_threshold() {
        let gts = vec![vec![[0.0, 0.0, 4.0, 4.0], [6.0, 0.0, 9.0, 3.0]]];
        let dets = vec![vec![
            det([0.5, 0.3, 4.2, 4.1], 0.9),
            det([6.2, 0.0, 9.0, 2.8], 0.7),
            det([1.0, 1.0, 2.0, 2.0], 0.5),
        ]];
        let mut prev = f64::INFINITY;
        for i in 0..10 {
            let thr = 0.5 + 0.05 * i as f64;
            let ap = average_precision(&dets, &gts, thr);
            assert!(ap <= prev + 1e-12, "ap increased at {thr}");
            prev = ap;
        }
    }

    #[test]
    fn count_error_cases() {
        let gts4 = vec![vec![[0.0, 0.0, 1.0, 1.0]; 4]];
        let dets5 = vec![vec![det([0.0, 0.0, 1.0, 1.0], 0.9); 5]];
        assert!((count_error_rate(&dets5, &gts4).unwrap() - 0.25).abs() < 1e-12);
        let dets4 = vec![vec![det([0.0, 0.0, 1.0, 1.0], 0.9); 4]];
        assert_eq!(count_error_rate(&dets4, &gts4).unwrap(), 0.0);
        // doubling an identical evaluation set leaves the rate unchanged
        let gts_double: Vec<_> = gts4.iter().chain(&gts4).cloned().collect();
        let dets_double: Vec<_> = dets5.iter().chain(&dets5).cloned().collect();
        assert!(
            (count_error_rate(&dets_double, &gts_double).unwrap() - 0.25).abs() < 1e-12
        );
        assert!(count_error_rate(&[Vec::new()], &[Vec::new()]).is_err());
    }

    #[test]
    fn count_error_zero_iff_counts_match() {
        let gts = vec![vec![[0.0, 0.0, 1.0, 1.0]; 2], vec![[0.0, 0.0, 1.0, 1.0]; 3]];
        let good = vec![vec![det([9.0, 9.0, 10.0, 10.0], 0.5); 2], vec![det([0.0, 0.0, 1.0, 1.0], 0.5); 3]];
        assert_eq!(count_error_rate(&good, &gts).unwrap(), 0.0);
        let off = vec![vec![det([0.0, 0.0, 1.0, 1.0], 0.5); 3], vec![det([0.0, 0.0, 1.0, 1.0], 0.5); 2]];
        assert!(count_error_rate(&off, &gts).unwrap() > 0.0);
    }

    #[test]
    fn detections_from_posteriors() {
        let pres = ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![0.9f64, 0.2]).unwrap();
        let boxes = ArrayD::from_shape_vec(
            IxDyn(&[2, 4]),
            vec![0.5, 0.5, 0.0, 0.0, 0.3, 0.3, 0.5, 0.5],
        )
        .unwrap();
        let dets = extract_detections(&pres, &boxes, 64, 0.5);
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].len(), 1);
        // scale 0.5 centered: (16, 16, 48, 48)
        let b = dets[0][0].bbox;
        assert!((b[0] - 16.0).abs() < 1e-9 && (b[1] - 16.0).abs() < 1e-9);
        assert!((b[2] - 48.0).abs() < 1e-9 && (b[3] - 48.0).abs() < 1e-9);

        let zero = ArrayD::from_elem(IxDyn(&[2, 3]), 0.0f64);
        let zb = ArrayD::from_elem(IxDyn(&[6, 4]), 0.4f64);
        let empty = extract_detections(&zero, &zb, 64, 0.5);
        assert!(empty.iter().all(|d| d.is_empty()));
    }

    #[test]
    fn detections_sorted_by_confidence() {
        let pres = ArrayD::from_shape_vec(IxDyn(&[1, 3]), vec![0.6f64, 0.9, 0.7]).unwrap();
        let boxes = ArrayD::from_elem(IxDyn(&[3, 4]), 0.4f64);
        let dets = extract_detections(&pres, &boxes, 32, 0.5);
        let confs: Vec<f64> = dets[0].iter().map(|d| d.confidence).collect();
        assert_eq!(confs, vec![0.9, 0.7, 0.6]);
    }

    #[test]
    fn pixel_mse_cases() {
        let a = ArrayD::from_elem(IxDyn(&[2, 3, 4, 4]), 0.0f64);
        let b = ArrayD::from_elem(IxDyn(&[2, 3, 4, 4]), 1.0f64);
        assert_eq!(pixel_mse(&a, &a).unwrap(), 0.0);
        assert_eq!(pixel_mse(&a, &b).unwrap(), 1.0);
        // checkerboard half-error
        let mut c = a.clone();
        let mut flip = false;
        c.mapv_inplace(|_| {
            flip = !flip;
            if flip {
                1.0
            } else {
                0.0
            }
        });
        assert_eq!(pixel_mse(&a, &c).unwrap(), 0.5);
        let d = ArrayD::from_elem(IxDyn(&[2, 3, 4, 5]), 0.0f64);
        assert!(pixel_mse(&a, &d).is_err());
    }

    #[test]
    fn benchmark_records_deterministic_in_configuration() {
        let cfg = BenchmarkConfig {
            image_size: 16,
            k: 2,
            batch: 1,
            warmup_steps: 1,
            timed_steps: 2,
            seed: 3,
        };
        let a = benchmark_latency(&[2, 4], &[FgMode::Parallel], &cfg).unwrap();
        let b = benchmark_latency(&[2, 4], &[FgMode::Parallel], &cfg).unwrap();
        let strip = |rs: &[LatencyRecord]| -> Vec<(usize, String, usize, usize, usize)> {
            rs.iter().map(|r| (r.grid, r.mode.clone(), r.k, r.batch, r.capacity)).collect()
        };
        assert_eq!(strip(&a), strip(&b));
    }

    #[test]
    fn benchmark_smoke() {
        let cfg = BenchmarkConfig {
            image_size: 16,
            k: 1,
            batch: 1,
            warmup_steps: 1,
            timed_steps: 2,
            seed: 0,
        };
        let records =
            benchmark_latency(&[2], &[FgMode::Parallel, FgMode::Sequential], &cfg).unwrap();
        assert_eq!(records.len(), 2);
        for r in &records {
            assert!(r.mean_s > 0.0);
            assert_eq!(r.capacity, 4 + 1);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bench.csv");
        write_latency_csv(&records, &p).unwrap();
        let body = std::fs::read_to_string(&p).unwrap();
        assert!(body.starts_with("grid,mode,K,batch,mean_s,std_s,capacity\n"));
        assert_eq!(body.lines().count(), 3);
    }
}
