//! Synthetic multi-sprite scenes with exact bounding-box annotations, plus a
//! loader for the on-disk layout:
//!
//! ```text
//! <root>/{train,val,test}/images/*.png
//! <root>/{train,val,test}/annotations.jsonl
//! <root>/manifest.json
//! ```
//!
//! Scenes are colored circles, squares, and triangles over a banded
//! background (sky/wall/floor with per-band jitter); later-drawn objects
//! occlude earlier ones, which stands in for depth ground truth.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{sc, Scalar};
use crate::tensor::require;

pub const MANIFEST_VERSION: u32 = 1;

/// Object colors; at least eight, visually distinct.
pub const PALETTE: [[u8; 3]; 8] = [
    [220, 40, 40],   // red
    [40, 180, 60],   // green
    [50, 80, 220],   // blue
    [230, 210, 50],  // yellow
    [200, 60, 200],  // magenta
    [60, 200, 210],  // cyan
    [240, 140, 40],  // orange
    [130, 70, 200],  // purple
];

/// Background themes: band colors top-to-bottom (2 or 3 bands).
pub const THEMES: [&[[u8; 3]]; 5] = [
    &[[140, 185, 235], [170, 150, 120], [110, 130, 90]], // sky / wall / floor
    &[[90, 110, 160], [180, 180, 190]],                  // dusk / pavement
    &[[210, 200, 170], [150, 110, 80], [90, 70, 60]],    // sand / brick / soil
    &[[60, 70, 90], [100, 120, 130]],                    // night / concrete
    &[[180, 220, 240], [120, 170, 110], [80, 110, 70]],  // day / grass / dirt
];

pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SceneSpec {
    pub image_size: usize,
    pub n_objects_min: usize,
    pub n_objects_max: usize,
    /// sprite size range as a fraction of the image side
    pub size_min: f64,
    pub size_max: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 64,
            n_objects_min: 4,
            n_objects_max: 8,
            size_min: 0.08,
            size_max: 0.25,
            seed: 0,
        }
    }
}

/// Preset mirroring the denser scene variant.
impl SceneSpec {
    pub fn large() -> Self {
        SceneSpec { n_objects_min: 10, n_objects_max: 16, ..Default::default() }
    }

    /// Parse the flat key=value format; unknown keys are errors.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut kv = crate::kvfile::KvFile::parse(text)?;
        let mut s = SceneSpec::default();
        if let Some(v) = kv.take::<usize>("image_size")? {
            s.image_size = v;
        }
        if let Some(v) = kv.take::<usize>("n_objects_min")? {
            s.n_objects_min = v;
        }
        if let Some(v) = kv.take::<usize>("n_objects_max")? {
            s.n_objects_max = v;
        }
        if let Some(v) = kv.take::<f64>("size_min")? {
            s.size_min = v;
        }
        if let Some(v) = kv.take::<f64>("size_max")? {
            s.size_max = v;
        }
        if let Some(v) = kv.take::<u64>("seed")? {
            s.seed = v;
        }
        kv.finish()?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        require(self.image_size >= 16, "image_size must be >= 16")?;
        require(
            self.n_objects_min >= 1 && self.n_objects_min <= self.n_objects_max,
            "object count range must satisfy 1 <= min <= max",
        )?;
        require(
            self.size_min > 0.0 && self.size_min <= self.size_max && self.size_max < 0.5,
            "sprite size range must satisfy 0 < min <= max < 0.5",
        )?;
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ObjectAnnotation {
    /// pixel box [x0, y0, x1, y1]
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub shape: String,
    pub color: usize,
    /// draw order; later objects occlude earlier ones
    pub order: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ImageAnnotation {
    pub file: String,
    pub w: u32,
    pub h: u32,
    pub objects: Vec<ObjectAnnotation>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub spec: SceneSpec,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

struct Sprite {
    shape: usize,
    color: usize,
    cx: f64,
    cy: f64,
    half: f64,
}

impl Sprite {
    fn bbox(&self) -> [f64; 4] {
        [self.cx - self.half, self.cy - self.half, self.cx + self.half, self.cy + self.half]
    }

    fn covers(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        match self.shape {
            0 => dx * dx + dy * dy <= self.half * self.half,
            1 => dx.abs() <= self.half && dy.abs() <= self.half,
            // upward triangle: apex at (cx, cy - half), base at cy + half
            2 => {
                if dy < -self.half || dy > self.half {
                    return false;
                }
                let width = (dy + self.half) / 2.0;
                dx.abs() <= width
            }
            _ => unreachable!(),
        }
    }
}

/// One rendered scene: u8 RGB pixels plus annotations in draw order.
fn render_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<ObjectAnnotation>) {
    let s = spec.image_size;
    let mut pixels = vec![0u8; s * s * 3];

    // banded background with per-band jitter
    let theme = THEMES[rng.gen_range(0..THEMES.len())];
    let n_bands = theme.len();
    let mut cuts = Vec::with_capacity(n_bands + 1);
    cuts.push(0usize);
    for b in 1..n_bands {
        let base = b * s / n_bands;
        let jitter = rng.gen_range(0..s / 8 + 1) as isize - (s / 16) as isize;
        cuts.push((base as isize + jitter).clamp(1, s as isize - 1) as usize);
    }
    cuts.push(s);
    cuts.sort_unstable();
    for b in 0..n_bands {
        let mut col = [0u8; 3];
        for c in 0..3 {
            let jit: i16 = rng.gen_range(-12..=12);
            col[c] = (theme[b][c] as i16 + jit).clamp(0, 255) as u8;
        }
        for y in cuts[b]..cuts[b + 1] {
            for x in 0..s {
                let idx = (y * s + x) * 3;
                pixels[idx..idx + 3].copy_from_slice(&col);
            }
        }
    }

    // sprites, fully inside the image, later ones on top
    let n_obj = rng.gen_range(spec.n_objects_min..=spec.n_objects_max);
    let mut sprites = Vec::with_capacity(n_obj);
    let mut annotations = Vec::with_capacity(n_obj);
    for order in 0..n_obj {
        let frac = rng.gen_range(spec.size_min..=spec.size_max);
        let half = ((frac * s as f64) / 2.0).max(1.5);
        let cx = rng.gen_range(half..s as f64 - half);
        let cy = rng.gen_range(half..s as f64 - half);
        let shape = rng.gen_range(0..SHAPES.len());
        let color = rng.gen_range(0..PALETTE.len());
        let sprite = Sprite { shape, color, cx, cy, half };
        annotations.push(ObjectAnnotation {
            bbox: sprite.bbox(),
            shape: SHAPES[shape].to_string(),
            color,
            order,
        });
        sprites.push(sprite);
    }
    for sprite in &sprites {
        let [x0, y0, x1, y1] = sprite.bbox();
        let col = PALETTE[sprite.color];
        for y in (y0.floor().max(0.0) as usize)..(y1.ceil().min(s as f64) as usize) {
            for x in (x0.floor().max(0.0) as usize)..(x1.ceil().min(s as f64) as usize) {
                if sprite.covers(x as f64 + 0.5, y as f64 + 0.5) {
                    let idx = (y * s + x) * 3;
                    pixels[idx..idx + 3].copy_from_slice(&col);
                }
            }
        }
    }
    (pixels, annotations)
}

fn write_split(
    spec: &SceneSpec,
    split: &str,
    count: usize,
    root: &Path,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let dir = root.join(split).join("images");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let ann_path = root.join(split).join("annotations.jsonl");
    let mut ann = std::io::BufWriter::new(
        std::fs::File::create(&ann_path).map_err(|e| Error::io(ann_path.display().to_string(), e))?,
    );
    let s = spec.image_size as u32;
    for i in 0..count {
        let (pixels, objects) = render_scene(spec, rng);
        let file = format!("{i:06}.png");
        let img: image::RgbImage =
            image::ImageBuffer::from_raw(s, s, pixels).expect("pixel buffer matches size");
        let path = dir.join(&file);
        img.save(&path).map_err(|e| {
            Error::io(path.display().to_string(), std::io::Error::other(e.to_string()))
        })?;
        let record = ImageAnnotation { file, w: s, h: s, objects };
        let line = serde_json::to_string(&record).expect("annotation serializes");
        writeln!(ann, "{line}").map_err(|e| Error::io(ann_path.display().to_string(), e))?;
    }
    Ok(())
}

/// Generate train/val/test splits under `out_dir`; deterministic in
/// `(spec, seed)`.
pub fn generate_dataset(
    spec: &SceneSpec,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    out_dir: &Path,
) -> Result<Manifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    write_split(spec, "train", n_train, out_dir, &mut rng)?;
    write_split(spec, "val", n_val, out_dir, &mut rng)?;
    write_split(spec, "test", n_test, out_dir, &mut rng)?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        spec: spec.clone(),
        n_train,
        n_val,
        n_test,
    };
    let mpath = out_dir.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&mpath, body).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    Ok(manifest)
}

/// A fully decoded split: images in `[0,1]`, channel-first.
pub struct Dataset {
    pub images: Vec<Array3<f32>>,
    pub annotations: Vec<ImageAnnotation>,
    pub image_size: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Deterministic shuffled index order for an epoch.
    pub fn shuffled_indices(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e3779b97f4a7c15));
        let mut idx: Vec<usize> = (0..self.len()).collect();
        // Fisher-Yates
        for i in (1..idx.len()).rev() {
            let j = rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        idx
    }

    /// Assemble `[B, 3, S, S]` from indices, converting to the scalar type.
    pub fn batch<S: Scalar>(&self, indices: &[usize]) -> ArrayD<S> {
        let s = self.image_size;
        let mut out = ArrayD::<S>::zeros(IxDyn(&[indices.len(), 3, s, s]));
        for (bi, &i) in indices.iter().enumerate() {
            let img = &self.images[i];
            for c in 0..3 {
                for y in 0..s {
                    for x in 0..s {
                        out[[bi, c, y, x]] = sc::<S>(img[[c, y, x]] as f64);
                    }
                }
            }
        }
        out
    }
}

fn decode_png(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e.to_string())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::<f32>::zeros((3, h, w));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = p.0[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// Load one split. With annotations present, their count must match the
/// image count; a plain image folder (no `annotations.jsonl`) loads with
/// empty annotations.
pub fn load_dataset(root: &Path, split: &str) -> Result<Dataset> {
    let dir = root.join(split).join("images");
    let dir = if dir.is_dir() { dir } else { root.join(split) };
    if !dir.is_dir() {
        return Err(Error::io(
            dir.display().to_string(),
            std::io::Error::new(std::io::ErrorKind::NotFound, "split directory not found"),
        ));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    files.sort();
    require(!files.is_empty(), format!("no png files under {}", dir.display()))?;

    let ann_path = root.join(split).join("annotations.jsonl");
    let annotations = if ann_path.is_file() {
        let file = std::fs::File::open(&ann_path)
            .map_err(|e| Error::io(ann_path.display().to_string(), e))?;
        let mut list = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(ann_path.display().to_string(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ImageAnnotation = serde_json::from_str(&line)
                .map_err(|e| Error::DataIntegrity(format!("bad annotation line: {e}")))?;
            list.push(rec);
        }
        if list.len() != files.len() {
            return Err(Error::DataIntegrity(format!(
                "{} annotations for {} images in {}",
                list.len(),
                files.len(),
                dir.display()
            )));
        }
        list
    } else {
        files
            .iter()
            .map(|f| ImageAnnotation {
                file: f.file_name().unwrap().to_string_lossy().into_owned(),
                w: 0,
                h: 0,
                objects: Vec::new(),
            })
            .collect()
    };

    let mut images = Vec::with_capacity(files.len());
    for f in &files {
        images.push(decode_png(f)?);
    }
    let image_size = images[0].shape()[1];
    for img in &images {
        if img.shape() != [3, image_size, image_size] {
            return Err(Error::DataIntegrity(format!(
                "inconsistent image shape {:?} in {}",
                img.shape(),
                dir.display()
            )));
        }
    }
    Ok(Dataset { images, annotations, image_size })
}

pub fn load_manifest(root: &Path) -> Result<Manifest> {
    let mpath = root.join("manifest.json");
    let body =
        std::fs::read_to_string(&mpath).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    serde_json::from_str(&body).map_err(|e| Error::DataIntegrity(format!("bad manifest: {e}")))
}
