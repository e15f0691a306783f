//! Rendered artifacts: score-map heatmap overlays and strictly binary mask
//! images, as written by the `predict` and `synth-preview` subcommands.

use std::path::Path;

use ndarray::Array2;

use crate::error::Result;
use crate::imageops::ImageTensor;

/// Blue-to-red heat colormap over `[0, 1]`.
fn heat_color(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

/// Alpha-blend a heat-colored score map over the image.
pub fn heatmap_overlay(image: &ImageTensor, map: &Array2<f64>, alpha: f64) -> image::RgbImage {
    assert_eq!(
        (image.height(), image.width()),
        (map.nrows(), map.ncols()),
        "overlay shapes"
    );
    let mut out = image::RgbImage::new(image.width() as u32, image.height() as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let (h, w) = (y as usize, x as usize);
        let heat = heat_color(map[(h, w)]);
        let mut rgb = [0u8; 3];
        for c in 0..3 {
            let base = image.data()[(h, w, c)] * 255.0;
            rgb[c] = ((1.0 - alpha) * base + alpha * f64::from(heat[c])).round() as u8;
        }
        *px = image::Rgb(rgb);
    }
    out
}

pub fn save_heatmap_overlay(
    image: &ImageTensor,
    map: &Array2<f64>,
    alpha: f64,
    path: &Path,
) -> Result<()> {
    heatmap_overlay(image, map, alpha).save(path)?;
    Ok(())
}

/// Write a `{0, 255}` grayscale mask.
pub fn save_mask(mask: &Array2<u8>, path: &Path) -> Result<()> {
    let mut img = image::GrayImage::new(mask.ncols() as u32, mask.nrows() as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        *px = image::Luma([if mask[(y as usize, x as usize)] != 0 { 255 } else { 0 }]);
    }
    img.save(path)?;
    Ok(())
}

pub fn save_image(image: &ImageTensor, path: &Path) -> Result<()> {
    let mut img = image::RgbImage::new(image.width() as u32, image.height() as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let mut rgb = [0u8; 3];
        for c in 0..3 {
            rgb[c] = (image.data()[(y as usize, x as usize, c)] * 255.0).round() as u8;
        }
        *px = image::Rgb(rgb);
    }
    img.save(path)?;
    Ok(())
}
