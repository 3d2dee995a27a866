//! Decomposition panels: one row of tiles per input image showing the
//! reconstruction, foreground pieces, detected boxes, and every background
//! component with its mixing map.

use std::path::Path;

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::evaluation::Detection;
use crate::scalar::Scalar;

const SEP: usize = 2;

fn put_tile<S: Scalar>(
    canvas: &mut image::RgbImage,
    tile_idx: usize,
    size: usize,
    fetch: impl Fn(usize, usize, usize) -> S,
) {
    let x_off = tile_idx * (size + SEP);
    for y in 0..size {
        for x in 0..size {
            let px = |c: usize| (fetch(c, y, x).as_f64().clamp(0.0, 1.0) * 255.0) as u8;
            canvas.put_pixel((x_off + x) as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
}

fn draw_box(canvas: &mut image::RgbImage, tile_idx: usize, size: usize, bbox: [f64; 4]) {
    let x_off = (tile_idx * (size + SEP)) as i64;
    let (x0, y0, x1, y1) = (
        bbox[0].round() as i64,
        bbox[1].round() as i64,
        bbox[2].round() as i64 - 1,
        bbox[3].round() as i64 - 1,
    );
    let red = image::Rgb([255, 40, 40]);
    let mut set = |x: i64, y: i64| {
        if x >= 0 && y >= 0 && (x as usize) < size && (y as usize) < size {
            canvas.put_pixel((x_off + x) as u32, y as u32, red);
        }
    };
    for x in x0..=x1 {
        set(x, y0);
        set(x, y1);
    }
    for y in y0..=y1 {
        set(x0, y);
        set(x1, y);
    }
}

/// Panel tile order: input, reconstruction, foreground mean, foreground
/// mask, boxes over the input, then (appearance, mixing map) per background
/// component; `4 + 2K + 1` tiles in total.
#[allow(clippy::too_many_arguments)]
pub fn render_panel<S: Scalar>(
    image_size: usize,
    k: usize,
    input: &ArrayD<S>,
    recon: &ArrayD<S>,
    mu_fg: &ArrayD<S>,
    alpha: &ArrayD<S>,
    mu_bg: &ArrayD<S>,
    pi: &ArrayD<S>,
    detections: &[Detection],
    out_path: &Path,
) -> Result<()> {
    let s = image_size;
    let tiles = 5 + 2 * k;
    let width = tiles * s + (tiles - 1) * SEP;
    let mut canvas = image::RgbImage::from_pixel(width as u32, s as u32, image::Rgb([255, 255, 255]));

    put_tile(&mut canvas, 0, s, |c, y, x| input[[0, c, y, x]]);
    put_tile(&mut canvas, 1, s, |c, y, x| recon[[0, c, y, x]]);
    put_tile(&mut canvas, 2, s, |c, y, x| mu_fg[[0, c, y, x]]);
    put_tile(&mut canvas, 3, s, |_, y, x| alpha[[0, 0, y, x]]);
    put_tile(&mut canvas, 4, s, |c, y, x| input[[0, c, y, x]]);
    for det in detections {
        draw_box(&mut canvas, 4, s, det.bbox);
    }
    for ki in 0..k {
        put_tile(&mut canvas, 5 + 2 * ki, s, |c, y, x| mu_bg[[0, ki, c, y, x]]);
        put_tile(&mut canvas, 6 + 2 * ki, s, |_, y, x| pi[[0, ki, 0, y, x]]);
    }
    canvas
        .save(out_path)
        .map_err(|e| Error::io(out_path.display().to_string(), std::io::Error::other(e.to_string())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn panel_has_expected_tile_count_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.png");
        let s = 16;
        let k = 3;
        let input = ArrayD::<f32>::from_elem(IxDyn(&[1, 3, s, s]), 0.5);
        let recon = input.clone();
        let mu_fg = input.clone();
        let alpha = ArrayD::<f32>::from_elem(IxDyn(&[1, 1, s, s]), 0.2);
        let mu_bg = ArrayD::<f32>::from_elem(IxDyn(&[1, k, 3, s, s]), 0.7);
        let pi = ArrayD::<f32>::from_elem(IxDyn(&[1, k, 1, s, s]), 1.0 / k as f32);
        let dets = vec![Detection { bbox: [2.0, 2.0, 9.0, 9.0], confidence: 0.9 }];
        render_panel(s, k, &input, &recon, &mu_fg, &alpha, &mu_bg, &pi, &dets, &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        let tiles = 5 + 2 * k;
        assert_eq!(img.width() as usize, tiles * s + (tiles - 1) * 2);
        assert_eq!(img.height() as usize, s);
    }
}
