//! Parametric-shape image classes for desk-scale runs.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssgan_core::tensor::Tensor;

use crate::dataset::{Manifest, ManifestRow, Split};
use crate::images::save_png;

/// Class names in class-id order.
pub const SHAPES: [&str; 8] = ["disc", "square", "triangle", "cross", "ring", "star", "bar", "diamond"];

/// Subsamples per pixel side for anti-aliasing.
const SUPERSAMPLE: usize = 4;

/// Largest rotation away from the upright pose, in radians.
const MAX_TILT: f64 = PI / 8.0;

fn polygon_contains(pts: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = pts.len() - 1;
    for i in 0..pts.len() {
        let ((xi, yi), (xj, yj)) = (pts[i], pts[j]);
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn regular(n: usize, radius: impl Fn(usize) -> f64) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let a = PI / 2.0 + TAU * i as f64 / n as f64;
            (radius(i) * a.cos(), radius(i) * a.sin())
        })
        .collect()
}

/// Whether the shape-local point `(x, y)` (unit scale) is inside `shape`.
fn inside(shape: usize, x: f64, y: f64) -> bool {
    let r = x.hypot(y);
    match shape {
        0 => r <= 1.0,
        1 => x.abs().max(y.abs()) <= 0.8,
        2 => polygon_contains(&regular(3, |_| 1.0), x, y),
        3 => (x.abs() <= 0.28 && y.abs() <= 1.0) || (y.abs() <= 0.28 && x.abs() <= 1.0),
        4 => (0.58..=1.0).contains(&r),
        5 => polygon_contains(&regular(10, |i| if i % 2 == 0 { 1.0 } else { 0.42 }), x, y),
        6 => x.abs() <= 1.0 && y.abs() <= 0.26,
        // Elongated so that it is not a rotated square.
        7 => x.abs() / 0.55 + y.abs() <= 1.0,
        _ => unreachable!("shape index checked by caller"),
    }
}

/// One image `[C×size×size]` of shape class `shape` in `[-1, 1]`, with
/// a jittered centre, random scale and brightness, and a small tilt.
pub fn render(shape: usize, size: usize, channels: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let s = size as f64;
    let scale = rng.random_range(0.28..0.38) * s;
    let jitter = 0.08 * s;
    let cx = s / 2.0 + rng.random_range(-jitter..jitter);
    let cy = s / 2.0 + rng.random_range(-jitter..jitter);
    let theta = rng.random_range(-MAX_TILT..MAX_TILT);
    let (sin, cos) = theta.sin_cos();
    let bg: Vec<f64> = (0..channels).map(|_| rng.random_range(0.0..0.35)).collect();
    let fg: Vec<f64> = (0..channels).map(|_| rng.random_range(0.55..1.0)).collect();
    let mut coverage = vec![0.0; size * size];
    let step = 1.0 / SUPERSAMPLE as f64;
    for py in 0..size {
        for px in 0..size {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let dx = px as f64 + (sx as f64 + 0.5) * step - cx;
                    let dy = py as f64 + (sy as f64 + 0.5) * step - cy;
                    let (lx, ly) = ((cos * dx + sin * dy) / scale, (-sin * dx + cos * dy) / scale);
                    hits += inside(shape, lx, ly) as usize;
                }
            }
            coverage[py * size + px] = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        }
    }
    Tensor::from_fn(&[channels, size, size], |i| {
        let (c, p) = (i / (size * size), i % (size * size));
        let v = bg[c] + (fg[c] - bg[c]) * coverage[p];
        (2.0 * v - 1.0) as f32
    })
}

#[derive(Clone, Copy, Debug)]
pub struct SyntheticSpec {
    pub n_train_classes: usize,
    pub n_test_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_train_classes: 5,
            n_test_classes: 3,
            per_class: 200,
            image_size: 32,
            channels: 1,
            seed: 0,
        }
    }
}

/// Writes PNGs under `out/images/<split>/` and `out/manifest.csv`. The first
/// `n_train_classes` shapes form the train split, the next
/// `n_test_classes` the test split.
pub fn generate(out: &Path, spec: &SyntheticSpec) -> Result<(PathBuf, Manifest)> {
    if spec.n_train_classes < 2 || spec.n_test_classes < 2 {
        bail!("need at least 2 train and 2 test classes");
    }
    if spec.n_train_classes + spec.n_test_classes > SHAPES.len() {
        bail!("at most {} shape classes are available", SHAPES.len());
    }
    if spec.per_class == 0 || spec.image_size < 8 {
        bail!("per_class must be >= 1 and image_size >= 8");
    }
    let mut rows = Vec::new();
    for class in 0..spec.n_train_classes + spec.n_test_classes {
        let split = if class < spec.n_train_classes { Split::Train } else { Split::Test };
        let dir = out.join("images").join(split.as_str());
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        // Per-class streams keep each class independent of the others.
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(class as u64);
        for i in 0..spec.per_class {
            let img = render(class, spec.image_size, spec.channels, &mut rng);
            let rel = format!("images/{}/{}_{i:04}.png", split.as_str(), SHAPES[class]);
            save_png(&out.join(&rel), &img)?;
            rows.push(ManifestRow { path: rel.into(), class_id: class, split });
        }
    }
    let manifest = Manifest::new(out.to_path_buf(), rows)?;
    let path = out.join("manifest.csv");
    manifest.write(&path)?;
    Ok((path, manifest))
}
