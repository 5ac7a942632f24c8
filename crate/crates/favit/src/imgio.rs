//! Binary PGM (P5) and PPM (P6) writers for attention maps, samples, and
//! masks.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::Result;
use crate::tensor::Tensor;

/// Grayscale P5, maxval 255.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), width * height);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}

/// RGB P6, maxval 255, interleaved pixels.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), 3 * width * height);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P6\n{width} {height}\n255\n")?;
    f.write_all(rgb)?;
    Ok(())
}

/// Min-max normalize values onto [0, 255]; a constant map becomes zeros.
pub fn normalize_to_bytes(values: &[f32]) -> Vec<u8> {
    let mut lo = f32::MAX;
    let mut hi = f32::MIN;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect()
}

/// One attention-map row rendered as a √L×√L grayscale grid.
pub fn attention_row_to_pgm(path: &Path, row: &[f32], grid: usize) -> Result<()> {
    assert_eq!(row.len(), grid * grid);
    write_pgm(path, grid, grid, &normalize_to_bytes(row))
}

/// A generated 3×H×W image in [0,1] as a PPM file.
pub fn sample_to_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let n = h * w;
    let data = image.data();
    let mut rgb = Vec::with_capacity(3 * n);
    for i in 0..n {
        for c in 0..3 {
            rgb.push((data[c * n + i] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    write_ppm(path, w, h, &rgb)
}

/// A binary mask as a black/white PGM.
pub fn mask_to_pgm(path: &Path, mask: &[u8], side: usize) -> Result<()> {
    let pixels: Vec<u8> = mask.iter().map(|&m| if m != 0 { 255 } else { 0 }).collect();
    write_pgm(path, side, side, &pixels)
}
