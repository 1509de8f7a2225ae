//! Labeled image datasets and a deterministic synthetic glyph generator.
//!
//! The generator renders ten stroke-based glyph classes at 28x28 with random
//! affine jitter, stroke thickness, contrast, and pixel noise. It exists so
//! the whole pipeline (training, attacks, transfer) runs hermetically from a
//! seed, with no dataset download; any MNIST-layout IDX dataset can be
//! substituted through the IDX reader.

use ndarray::{Array3, Array4, Axis};
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{HaamError, Result};
use crate::perturbation::ImageTensor;

/// Which half of an experiment a dataset feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Images with class labels. Pixels are stored as bytes and widened to real
/// intensities on access.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Array4<u8>,
    labels: Vec<u8>,
    num_classes: usize,
    split: Split,
}

impl LabeledDataset {
    pub fn new(
        images: Array4<u8>,
        labels: Vec<u8>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let (n, h, w, c) = images.dim();
        if labels.len() != n {
            return Err(HaamError::IdxCountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        if n > 0 && (h < 2 || w < 2 || (c != 1 && c != 3)) {
            return Err(HaamError::InvalidDimension(format!(
                "unsupported image shape ({h}, {w}, {c})"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| (l as usize) >= num_classes) {
            return Err(HaamError::InvalidLabel {
                label: bad as usize,
                num_classes,
            });
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.images.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// `(H, W, C)` of each image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let (_, h, w, c) = self.images.dim();
        (h, w, c)
    }

    pub fn image(&self, index: usize) -> ImageTensor {
        let bytes = self.images.index_axis(Axis(0), index).to_owned();
        ImageTensor::from_u8(&bytes).expect("dataset invariants guarantee a valid image")
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn raw_images(&self) -> &Array4<u8> {
        &self.images
    }

    /// Gather `(B, H, W, C)` real intensities in `[0,255]` for the given
    /// indices.
    pub fn batch_pixels(&self, indices: &[usize]) -> Array4<f64> {
        let (_, h, w, c) = self.images.dim();
        let mut out = Array4::zeros((indices.len(), h, w, c));
        for (row, &idx) in indices.iter().enumerate() {
            out.index_axis_mut(Axis(0), row)
                .assign(&self.images.index_axis(Axis(0), idx).mapv(f64::from));
        }
        out
    }
}

/// Glyph strokes in a `[-1,1]` square: line segments plus circle outlines.
struct Shape {
    segments: &'static [((f64, f64), (f64, f64))],
    circles: &'static [((f64, f64), f64)],
}

impl Shape {
    /// Distance from a point to the nearest stroke centerline.
    fn distance(&self, x: f64, y: f64) -> f64 {
        let mut best = f64::INFINITY;
        for &((ax, ay), (bx, by)) in self.segments {
            let (dx, dy) = (bx - ax, by - ay);
            let len2 = dx * dx + dy * dy;
            let t = (((x - ax) * dx + (y - ay) * dy) / len2).clamp(0.0, 1.0);
            let (px, py) = (ax + t * dx - x, ay + t * dy - y);
            best = best.min((px * px + py * py).sqrt());
        }
        for &((cx, cy), r) in self.circles {
            let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
            best = best.min((d - r).abs());
        }
        best
    }
}

pub const GLYPH_CLASSES: usize = 10;

/// Stroke layout per class: ring, vertical bar, horizontal bar, plus, cross,
/// square, triangle, zigzag, tee, double ring.
fn class_shape(class: usize) -> Shape {
    const RING: Shape = Shape {
        segments: &[],
        circles: &[((0.0, 0.0), 0.58)],
    };
    const VBAR: Shape = Shape {
        segments: &[((0.0, -0.68), (0.0, 0.68))],
        circles: &[],
    };
    const HBAR: Shape = Shape {
        segments: &[((-0.68, 0.0), (0.68, 0.0))],
        circles: &[],
    };
    const PLUS: Shape = Shape {
        segments: &[((0.0, -0.62), (0.0, 0.62)), ((-0.62, 0.0), (0.62, 0.0))],
        circles: &[],
    };
    const CROSS: Shape = Shape {
        segments: &[((-0.55, -0.55), (0.55, 0.55)), ((-0.55, 0.55), (0.55, -0.55))],
        circles: &[],
    };
    const SQUARE: Shape = Shape {
        segments: &[
            ((-0.52, -0.52), (0.52, -0.52)),
            ((0.52, -0.52), (0.52, 0.52)),
            ((0.52, 0.52), (-0.52, 0.52)),
            ((-0.52, 0.52), (-0.52, -0.52)),
        ],
        circles: &[],
    };
    const TRIANGLE: Shape = Shape {
        segments: &[
            ((0.0, -0.6), (0.58, 0.5)),
            ((0.58, 0.5), (-0.58, 0.5)),
            ((-0.58, 0.5), (0.0, -0.6)),
        ],
        circles: &[],
    };
    const ZIGZAG: Shape = Shape {
        segments: &[
            ((-0.55, -0.55), (0.55, -0.55)),
            ((0.55, -0.55), (-0.55, 0.55)),
            ((-0.55, 0.55), (0.55, 0.55)),
        ],
        circles: &[],
    };
    const TEE: Shape = Shape {
        segments: &[((-0.6, -0.55), (0.6, -0.55)), ((0.0, -0.55), (0.0, 0.65))],
        circles: &[],
    };
    const DOUBLE_RING: Shape = Shape {
        segments: &[],
        circles: &[((0.0, -0.34), 0.3), ((0.0, 0.34), 0.3)],
    };
    match class {
        0 => RING,
        1 => VBAR,
        2 => HBAR,
        3 => PLUS,
        4 => CROSS,
        5 => SQUARE,
        6 => TRIANGLE,
        7 => ZIGZAG,
        8 => TEE,
        9 => DOUBLE_RING,
        _ => panic!("glyph classes are 0..{GLYPH_CLASSES}"),
    }
}

pub const GLYPH_DIM: usize = 28;

/// Render one glyph with the given per-image generator.
fn render_glyph(class: usize, rng: &mut ChaCha8Rng) -> Array3<u8> {
    let shape = class_shape(class);
    let theta: f64 = rng.random_range(-0.55..0.55);
    let scale_x = rng.random_range(0.62..1.24);
    let scale_y = rng.random_range(0.62..1.24);
    let shift_x = rng.random_range(-0.24..0.24);
    let shift_y = rng.random_range(-0.24..0.24);
    let thickness = rng.random_range(0.05..0.17);
    let edge = 0.12;
    let foreground = rng.random_range(120.0..255.0);
    let background = rng.random_range(0.0..60.0);
    let noise = rng.random_range(20.0..60.0);

    let (sin_t, cos_t) = theta.sin_cos();
    let mut out = Array3::zeros((GLYPH_DIM, GLYPH_DIM, 1));
    for i in 0..GLYPH_DIM {
        for j in 0..GLYPH_DIM {
            let u = (j as f64 + 0.5) / GLYPH_DIM as f64 * 2.0 - 1.0;
            let v = (i as f64 + 0.5) / GLYPH_DIM as f64 * 2.0 - 1.0;
            // Invert the jitter: un-translate, un-rotate, un-scale.
            let (tu, tv) = (u - shift_x, v - shift_y);
            let (ru, rv) = (cos_t * tu + sin_t * tv, -sin_t * tu + cos_t * tv);
            let (px, py) = (ru / scale_x, rv / scale_y);
            let dist = shape.distance(px, py);
            let coverage = ((thickness + edge - dist) / edge).clamp(0.0, 1.0);
            let value = background
                + (foreground - background) * coverage
                + rng.random_range(-noise..noise);
            out[[i, j, 0]] = value.clamp(0.0, 255.0).round() as u8;
        }
    }
    out
}

/// Generate `count` labeled glyphs, classes balanced round-robin. Every image
/// draws from its own counter-derived stream, so the result depends only on
/// `(count, seed, split)` and any subset can be regenerated independently.
pub fn synthetic_glyphs(count: usize, seed: u64, split: Split) -> LabeledDataset {
    // Keep train and test streams disjoint for one seed.
    let split_salt = match split {
        Split::Train => 0u64,
        Split::Test => 1u64 << 32,
    };
    let mut images = Array4::zeros((count, GLYPH_DIM, GLYPH_DIM, 1));
    let mut labels = Vec::with_capacity(count);
    for index in 0..count {
        let class = index % GLYPH_CLASSES;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(split_salt + index as u64);
        images
            .index_axis_mut(Axis(0), index)
            .assign(&render_glyph(class, &mut rng));
        labels.push(class as u8);
    }
    LabeledDataset::new(images, labels, GLYPH_CLASSES, split)
        .expect("generator output is well-formed")
}
