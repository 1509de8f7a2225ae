//! Visual-quality metrics (SSIM, Laplacian maps, edge SSIM, PNR), transfer
//! rate, and the bucketed report tables.
//!
//! SSIM follows the standard formulation: 11x11 Gaussian window with sigma
//! 1.5, K1 = 0.01, K2 = 0.03, dynamic range 255, averaged over valid window
//! positions on the luminance plane. Edge SSIM applies the same measure to
//! Laplacian maps affinely rescaled into intensity range.

use ndarray::{Array2, Array3};

use crate::classifier::ModelSpec;
use crate::error::{HaamError, Result};
use crate::perturbation::ImageTensor;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const DYNAMIC_RANGE: f64 = 255.0;

/// The three quality figures for one (reference, distorted) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub ssim: f64,
    pub essim: f64,
    pub pnr: f64,
}

/// Compute all three metrics at once.
pub fn metric_report(reference: &ImageTensor, distorted: &ImageTensor) -> Result<MetricReport> {
    Ok(MetricReport {
        ssim: ssim(reference, distorted)?,
        essim: essim(reference, distorted)?,
        pnr: pnr(reference, distorted)?,
    })
}

fn check_same_shape(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(HaamError::ShapeMismatch(format!(
            "image shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// BT.601 luminance plane; identity for single-channel images.
fn luminance(image: &ImageTensor) -> Array2<f64> {
    match image.channels() {
        1 => image.plane(0),
        _ => {
            let (r, g, b) = (image.plane(0), image.plane(1), image.plane(2));
            let mut out = r;
            out.zip_mut_with(&g, |o, &g| *o = 0.299 * *o + 0.587 * g);
            out.zip_mut_with(&b, |o, &b| *o += 0.114 * b);
            out
        }
    }
}

fn gaussian_window() -> Array2<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = Array2::from_shape_fn((SSIM_WINDOW, SSIM_WINDOW), |(i, j)| {
        let (di, dj) = (i as f64 - half, j as f64 - half);
        (-(di * di + dj * dj) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let sum = w.sum();
    w.mapv_inplace(|v| v / sum);
    w
}

/// SSIM between two planes of equal shape, averaged over valid (fully
/// interior) window positions.
fn ssim_planes(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(HaamError::UndefinedMetric(format!(
            "{h}x{w} image has no valid {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let window = gaussian_window();
    let c1 = (SSIM_K1 * DYNAMIC_RANGE).powi(2);
    let c2 = (SSIM_K2 * DYNAMIC_RANGE).powi(2);

    let mut total = 0.0;
    let mut positions = 0usize;
    for i in 0..=h - SSIM_WINDOW {
        for j in 0..=w - SSIM_WINDOW {
            let (mut mx, mut my) = (0.0, 0.0);
            let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
            for wi in 0..SSIM_WINDOW {
                for wj in 0..SSIM_WINDOW {
                    let wt = window[[wi, wj]];
                    let x = a[[i + wi, j + wj]];
                    let y = b[[i + wi, j + wj]];
                    mx += wt * x;
                    my += wt * y;
                    sxx += wt * x * x;
                    syy += wt * y * y;
                    sxy += wt * x * y;
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cov = sxy - mx * my;
            let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            total += num / den;
            positions += 1;
        }
    }
    Ok(total / positions as f64)
}

/// Structural similarity of the luminance planes.
pub fn ssim(reference: &ImageTensor, distorted: &ImageTensor) -> Result<f64> {
    check_same_shape(reference, distorted)?;
    ssim_planes(&luminance(reference), &luminance(distorted))
}

/// Per-channel 5-point Laplacian `[[0,1,0],[1,-4,1],[0,1,0]]` with replicate
/// (edge-clamp) padding, so constant images map to zero everywhere. Values
/// lie in `[-1020, 1020]`.
pub fn laplacian_map(image: &ImageTensor) -> Vec<Array2<f64>> {
    let (h, w, c) = image.shape();
    let px = image.pixels();
    (0..c)
        .map(|ci| {
            Array2::from_shape_fn((h, w), |(i, j)| {
                let up = px[[i.saturating_sub(1), j, ci]];
                let down = px[[(i + 1).min(h - 1), j, ci]];
                let left = px[[i, j.saturating_sub(1), ci]];
                let right = px[[i, (j + 1).min(w - 1), ci]];
                up + down + left + right - 4.0 * px[[i, j, ci]]
            })
        })
        .collect()
}

/// Rescale Laplacian maps from `[-1020, 1020]` into `[0, 255]` and stack
/// them back into an image.
fn laplacian_as_image(image: &ImageTensor) -> ImageTensor {
    let (h, w, c) = image.shape();
    let maps = laplacian_map(image);
    let mut px = Array3::zeros((h, w, c));
    for (ci, map) in maps.iter().enumerate() {
        for i in 0..h {
            for j in 0..w {
                px[[i, j, ci]] = (map[[i, j]] + 1020.0) * (DYNAMIC_RANGE / 2040.0);
            }
        }
    }
    ImageTensor::new(px).expect("rescaled Laplacian lies in intensity range")
}

/// Edge SSIM: SSIM applied to the rescaled Laplacian maps of both images.
pub fn essim(reference: &ImageTensor, distorted: &ImageTensor) -> Result<f64> {
    check_same_shape(reference, distorted)?;
    ssim(&laplacian_as_image(reference), &laplacian_as_image(distorted))
}

/// Perturbation norm ratio: L2 of the difference over L2 of the reference,
/// across all pixels and channels.
pub fn pnr(reference: &ImageTensor, distorted: &ImageTensor) -> Result<f64> {
    check_same_shape(reference, distorted)?;
    let ref_norm = reference.pixels().iter().map(|v| v * v).sum::<f64>().sqrt();
    if ref_norm == 0.0 {
        return Err(HaamError::UndefinedMetric(
            "PNR is undefined for an all-zero reference image".into(),
        ));
    }
    let diff_norm = reference
        .pixels()
        .iter()
        .zip(distorted.pixels().iter())
        .map(|(r, d)| (d - r) * (d - r))
        .sum::<f64>()
        .sqrt();
    Ok(diff_norm / ref_norm)
}

/// One source-model adversary, ready for evaluation against a target model.
#[derive(Debug, Clone)]
pub struct TransferCase {
    pub adversarial_image: ImageTensor,
    pub label: usize,
    /// Whether the source attack succeeded; only these enter `S_s`.
    pub adv: bool,
}

/// Transfer outcome: `rate = |S_t| / |S_s|`, absent when `S_s` is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferReport {
    pub source_count: usize,
    pub transferred_count: usize,
    pub rate: Option<f64>,
}

/// Evaluate how many source adversaries also fool the target model.
pub fn transfer_rate(cases: &[TransferCase], target: &ModelSpec) -> Result<TransferReport> {
    let mut source_count = 0usize;
    let mut transferred_count = 0usize;
    for case in cases {
        if !case.adv {
            continue;
        }
        source_count += 1;
        if target.predict(&case.adversarial_image)? != case.label {
            transferred_count += 1;
        }
    }
    let rate = if source_count > 0 {
        Some(transferred_count as f64 / source_count as f64)
    } else {
        None
    };
    Ok(TransferReport {
        source_count,
        transferred_count,
        rate,
    })
}

/// Bucketing schemes for the aggregate tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BucketScheme {
    /// PNR split into ten right-closed buckets over `(0, 0.2]`.
    Pnr10,
    /// SSIM split into three left-closed buckets over `[0.9, 1.0)`.
    Ssim3,
    /// Edge SSIM split into three left-closed buckets over `[0.8, 1.0)`.
    Essim3,
}

impl BucketScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            BucketScheme::Pnr10 => "pnr10",
            BucketScheme::Ssim3 => "ssim3",
            BucketScheme::Essim3 => "essim3",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "pnr10" => Ok(BucketScheme::Pnr10),
            "ssim3" => Ok(BucketScheme::Ssim3),
            "essim3" => Ok(BucketScheme::Essim3),
            other => Err(HaamError::InvalidParameter(format!(
                "unknown bucket scheme '{other}' (expected pnr10, ssim3, or essim3)"
            ))),
        }
    }

    /// Bucket edges `(lo, hi)` in order.
    pub fn edges(self) -> Vec<(f64, f64)> {
        match self {
            BucketScheme::Pnr10 => (0..10)
                .map(|k| (k as f64 * 0.02, (k + 1) as f64 * 0.02))
                .collect(),
            BucketScheme::Ssim3 => (0..3)
                .map(|k| {
                    (
                        0.9 + k as f64 * (0.1 / 3.0),
                        0.9 + (k + 1) as f64 * (0.1 / 3.0),
                    )
                })
                .collect(),
            BucketScheme::Essim3 => (0..3)
                .map(|k| {
                    (
                        0.8 + k as f64 * (0.2 / 3.0),
                        0.8 + (k + 1) as f64 * (0.2 / 3.0),
                    )
                })
                .collect(),
        }
    }

    /// Index of the bucket containing `value`, or `None` when out of range.
    /// PNR buckets are right-closed `(lo, hi]`; SSIM and edge-SSIM buckets
    /// are left-closed `[lo, hi)`.
    pub fn bucket_of(self, value: f64) -> Option<usize> {
        let right_closed = matches!(self, BucketScheme::Pnr10);
        self.edges().iter().position(|&(lo, hi)| {
            if right_closed {
                value > lo && value <= hi
            } else {
                value >= lo && value < hi
            }
        })
    }
}

/// One row of a bucketed aggregate table. The trailing out-of-range row has
/// no edges.
#[derive(Debug, Clone, PartialEq)]
pub struct BucketRow {
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub count: usize,
    pub mean_metric: Option<f64>,
    pub transfer_rate: Option<f64>,
}

/// A successful adversary tagged with its metric value for bucketing.
#[derive(Debug, Clone)]
pub struct BucketCase {
    pub metric_value: f64,
    pub adversarial_image: ImageTensor,
    pub label: usize,
}

/// Aggregate adversaries into the scheme's buckets plus an out-of-range row.
/// Each row reports its population, mean metric, and, when a target model is
/// supplied, the fraction of its members that fool the target.
pub fn bucket_report(
    cases: &[BucketCase],
    scheme: BucketScheme,
    target: Option<&ModelSpec>,
) -> Result<Vec<BucketRow>> {
    let edges = scheme.edges();
    let mut members: Vec<Vec<&BucketCase>> = vec![Vec::new(); edges.len() + 1];
    for case in cases {
        let slot = scheme.bucket_of(case.metric_value).unwrap_or(edges.len());
        members[slot].push(case);
    }

    let mut rows = Vec::with_capacity(members.len());
    for (slot, bucket) in members.iter().enumerate() {
        let (lo, hi) = if slot < edges.len() {
            (Some(edges[slot].0), Some(edges[slot].1))
        } else {
            (None, None)
        };
        let count = bucket.len();
        let mean_metric = if count > 0 {
            Some(bucket.iter().map(|c| c.metric_value).sum::<f64>() / count as f64)
        } else {
            None
        };
        let transfer_rate = match (target, count) {
            (Some(model), n) if n > 0 => {
                let mut fooled = 0usize;
                for case in bucket {
                    if model.predict(&case.adversarial_image)? != case.label {
                        fooled += 1;
                    }
                }
                Some(fooled as f64 / n as f64)
            }
            _ => None,
        };
        rows.push(BucketRow {
            lo,
            hi,
            count,
            mean_metric,
            transfer_rate,
        });
    }
    Ok(rows)
}

/// Render a bucket table as comma-separated text with the fixed header
/// `scheme,bucket_lo,bucket_hi,count,mean_metric,transfer_rate`. Absent
/// values render as empty cells.
pub fn bucket_csv(scheme: BucketScheme, rows: &[BucketRow]) -> String {
    let mut out = String::from("scheme,bucket_lo,bucket_hi,count,mean_metric,transfer_rate\n");
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            scheme.as_str(),
            cell(row.lo),
            cell(row.hi),
            row.count,
            cell(row.mean_metric),
            cell(row.transfer_rate),
        ));
    }
    out
}
