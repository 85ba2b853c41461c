//! Toy image domain and image-directory ingestion.

use std::path::{Path, PathBuf};

use crate::error::{invalid, Result};
use crate::image::{Image, ImageBatch};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Procedural "shapes" images: a two-colour linear gradient background with
/// one to three soft-edged discs or rectangles and faint sensor noise.
pub fn synth_shapes(count: usize, size: usize, seed: u64) -> Result<Vec<Image>> {
    if size < 8 {
        return Err(invalid("synthetic images need size ≥ 8"));
    }
    let mut rng = Rng::new(seed);
    (0..count).map(|_| synth_one(size, &mut rng)).collect()
}

fn synth_one(size: usize, rng: &mut Rng) -> Result<Image> {
    let s = size as f64;
    let plane = size * size;
    let mut color = || [rng.uniform(), rng.uniform(), rng.uniform()];
    let (c0, c1) = (color(), color());
    let mut data = vec![0.0f32; 3 * plane];
    let angle = rng.uniform() * std::f64::consts::TAU;
    let (dx, dy) = (angle.cos(), angle.sin());
    for y in 0..size {
        for x in 0..size {
            let t = (((x as f64 / s - 0.5) * dx + (y as f64 / s - 0.5) * dy) + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                data[c * plane + y * size + x] = (c0[c] * (1.0 - t) + c1[c] * t) as f32;
            }
        }
    }
    let shapes = rng.int_range(1, 3);
    for _ in 0..shapes {
        let fill = [rng.uniform(), rng.uniform(), rng.uniform()];
        let cx = rng.uniform_range(0.15, 0.85) * s;
        let cy = rng.uniform_range(0.15, 0.85) * s;
        let disc = rng.bernoulli(0.5);
        let (rx, ry) = (
            rng.uniform_range(0.1, 0.3) * s,
            rng.uniform_range(0.1, 0.3) * s,
        );
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                // signed distance (in pixels) to the boundary, negative inside
                let d = if disc {
                    (px * px + py * py).sqrt() - rx
                } else {
                    (px.abs() - rx).max(py.abs() - ry)
                };
                let cover = (0.5 - d).clamp(0.0, 1.0);
                if cover > 0.0 {
                    for c in 0..3 {
                        let v = &mut data[c * plane + y * size + x];
                        *v = (*v as f64 * (1.0 - cover) + fill[c] * cover) as f32;
                    }
                }
            }
        }
    }
    for v in data.iter_mut() {
        *v = (*v + 0.01 * rng.normal() as f32).clamp(0.0, 1.0);
    }
    Image::new(Tensor::new(&[3, size, size], data)?)
}

/// Outcome of reading an image directory.
#[derive(Debug, Default)]
pub struct Ingest {
    pub images: Vec<Image>,
    pub paths: Vec<PathBuf>,
    /// Files that could not be decoded or had the wrong size.
    pub skipped: Vec<PathBuf>,
}

const EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

/// Read every image file in `dir` (sorted by name). Unreadable files are
/// skipped and listed. Images whose size differs from `size` are bilinearly
/// resized when `resize` is set and skipped otherwise.
pub fn load_dir(dir: &Path, size: Option<usize>, resize: bool) -> Result<Ingest> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    entries.sort();
    let mut out = Ingest::default();
    for path in entries {
        match Image::load(&path) {
            Ok(img) => {
                let img = match size {
                    Some(s) if img.size() != s && resize => img.resize(s),
                    Some(s) if img.size() != s => {
                        log::warn!("{}: size {} != {s}, skipped", path.display(), img.size());
                        out.skipped.push(path);
                        continue;
                    }
                    _ => img,
                };
                out.images.push(img);
                out.paths.push(path);
            }
            Err(e) => {
                log::warn!("{}: {e}; skipped", path.display());
                out.skipped.push(path);
            }
        }
    }
    Ok(out)
}

/// Pack a slice of images into one batch.
pub fn batch_of(images: &[Image]) -> Result<ImageBatch> {
    ImageBatch::from_images(images)
}
