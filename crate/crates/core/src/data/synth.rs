//! Parametric figures whose appearance follows the concept tree.
//!
//! The root ancestor of a leaf picks the shape family and tint, the
//! mid-level ancestor picks the fill pattern and the leaf's position among
//! its brothers picks a size/orientation band.

use std::f64::consts::PI;

use crate::error::{HcwError, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::tree::{ConceptId, ConceptTree};

pub const CHANNELS: usize = 3;
const SUPERSAMPLE: usize = 2;
const BACKGROUND: [f64; CHANNELS] = [0.15, 0.15, 0.2];
const TINTS: [[f64; CHANNELS]; 4] = [
    [0.95, 0.45, 0.25],
    [0.35, 0.85, 0.3],
    [0.3, 0.5, 0.95],
    [0.9, 0.85, 0.3],
];
const BAND_SCALES: [f64; 3] = [0.7, 1.0, 1.3];

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub tree: ConceptTree,
    pub per_leaf: usize,
    pub image_size: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn default_with_seed(seed: u64) -> Self {
        Self {
            tree: ConceptTree::default_tree(),
            per_leaf: 60,
            image_size: 32,
            noise_sigma: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_leaf < 10 {
            return Err(HcwError::validation(format!(
                "per_leaf must be >= 10, got {}",
                self.per_leaf
            )));
        }
        if self.image_size < 16 {
            return Err(HcwError::validation(format!(
                "image_size must be >= 16, got {}",
                self.image_size
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(HcwError::validation(format!(
                "noise sigma must be a finite value >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.tree.leaves().len() < 2 {
            return Err(HcwError::validation("the tree needs at least two leaves"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Style {
    family: usize,
    tint: [f64; CHANNELS],
    fill: usize,
    scale: f64,
    angle: f64,
}

fn position(pool: &[ConceptId], id: ConceptId) -> usize {
    pool.iter().position(|&c| c == id).unwrap_or(0)
}

fn style_of(tree: &ConceptTree, leaf: ConceptId) -> Style {
    let path = tree.path_to(leaf);
    let roots = tree.roots();
    let family = position(&roots, path[0]);
    let fill = if path.len() >= 2 {
        position(tree.children(path[0]), path[1])
    } else {
        0
    };
    let band = match tree.parent(leaf) {
        Some(p) if path.len() >= 3 => position(tree.children(p), leaf),
        _ => 0,
    };
    Style {
        family: family % 3,
        tint: TINTS[family % TINTS.len()],
        fill: fill % 3,
        scale: BAND_SCALES[band % 3],
        angle: band as f64 * PI / 6.0,
    }
}

/// Normalised radius: `< 1` inside the figure.
fn radius(family: usize, x: f64, y: f64) -> f64 {
    match family {
        0 => (x * x + (y / 0.6) * (y / 0.6)).sqrt(),
        1 => x.abs() + (y / 0.75).abs(),
        _ => {
            const ARM: f64 = 0.32;
            let horizontal = x.abs().max(y.abs() / ARM);
            let vertical = (x.abs() / ARM).max(y.abs());
            horizontal.min(vertical)
        }
    }
}

fn fill_intensity(fill: usize, x: f64, rho: f64) -> f64 {
    match fill {
        0 => 1.0,
        1 => {
            if ((x + 4.0) * 2.5).floor() as i64 % 2 == 0 {
                1.0
            } else {
                0.3
            }
        }
        _ => {
            if rho > 0.6 {
                1.0
            } else {
                0.2
            }
        }
    }
}

fn render(style: &Style, size: usize, noise: f64, rng: &mut SeededRng, out: &mut [f64]) {
    let s = size as f64;
    let jitter = 0.25;
    let cx = rng.uniform(-jitter, jitter);
    let cy = rng.uniform(-jitter, jitter);
    let scale = style.scale * rng.uniform(0.93, 1.07) * 0.5;
    let angle = style.angle + rng.uniform(-PI / 36.0, PI / 36.0);
    let (sin, cos) = angle.sin_cos();
    let plane = size * size;
    for py in 0..size {
        for px in 0..size {
            let mut coverage = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let u =
                        (px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64) / s * 2.0 - 1.0 - cx;
                    let v =
                        (py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64) / s * 2.0 - 1.0 - cy;
                    let lx = (cos * u + sin * v) / scale;
                    let ly = (-sin * u + cos * v) / scale;
                    let rho = radius(style.family, lx, ly);
                    if rho < 1.0 {
                        coverage += fill_intensity(style.fill, lx, rho);
                    }
                }
            }
            coverage /= (SUPERSAMPLE * SUPERSAMPLE) as f64;
            for c in 0..CHANNELS {
                let clean = BACKGROUND[c] + coverage * (style.tint[c] - BACKGROUND[c]);
                let noisy = if noise > 0.0 {
                    clean + noise * rng.normal()
                } else {
                    clean
                };
                out[c * plane + py * size + px] = noisy.clamp(0.0, 1.0) as f32 as f64;
            }
        }
    }
}

/// What [`generate_dataset`] returns before splitting.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub images: Tensor,
    /// Leaf concept of every image; images are grouped by leaf in tree order.
    pub labels: Vec<ConceptId>,
}

/// Image `i` depends only on `(spec.seed, i)` and its leaf's style.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Generated> {
    spec.validate()?;
    let leaves = spec.tree.leaves();
    let n = leaves.len() * spec.per_leaf;
    let size = spec.image_size;
    let per_image = CHANNELS * size * size;
    let mut data = vec![0.0; n * per_image];
    let mut labels = Vec::with_capacity(n);
    for (i, chunk) in data.chunks_mut(per_image).enumerate() {
        let leaf = leaves[i / spec.per_leaf];
        let style = style_of(&spec.tree, leaf);
        let mut rng = SeededRng::with_stream(spec.seed, i as u64);
        render(&style, size, spec.noise_sigma, &mut rng, chunk);
        labels.push(leaf);
    }
    Ok(Generated {
        images: Tensor::from_vec(&[n, CHANNELS, size, size], data)?,
        labels,
    })
}
