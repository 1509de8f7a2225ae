//! Batched tensor primitives for the built-in classifiers: dense layers,
//! valid 3x3 convolution via im2col and matrix multiplication, 2x2 max
//! pooling, ReLU, and the numerically stable softmax head.
//!
//! Activations flow as `(batch, channels, height, width)` for the
//! convolutional path and `(batch, features)` for dense layers.

use ndarray::{Array1, Array2, Array4, Axis};

/// `y = x W^T + b` for `x: (B, D)`, `w: (F, D)`, `b: (F)`.
pub fn dense_forward(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = x.dot(&w.t());
    out += b;
    out
}

/// Gradients of a dense layer: `(dx, dw, db)` from upstream `d_out: (B, F)`.
pub fn dense_backward(
    x: &Array2<f64>,
    w: &Array2<f64>,
    d_out: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let dx = d_out.dot(w);
    let dw = d_out.t().dot(x);
    let db = d_out.sum_axis(Axis(0));
    (dx, dw, db)
}

pub fn relu(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zero upstream gradients wherever the forward output was clamped.
pub fn relu_backward(forward_out: &[f64], d_out: &mut [f64]) {
    for (g, &y) in d_out.iter_mut().zip(forward_out) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Unfold 3x3 valid-convolution patches of `x: (B, C, H, W)` into a
/// `(C*9, B*Ho*Wo)` matrix with `Ho = H-2`, `Wo = W-2`. Column `b*Ho*Wo +
/// i*Wo + j` holds the patch at output position `(i, j)` of batch item `b`.
pub fn im2col3(x: &Array4<f64>) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let (ho, wo) = (h - 2, w - 2);
    let mut cols = Array2::zeros((c * 9, b * ho * wo));
    for bi in 0..b {
        for ci in 0..c {
            for ki in 0..3 {
                for kj in 0..3 {
                    let row = ci * 9 + ki * 3 + kj;
                    for i in 0..ho {
                        for j in 0..wo {
                            cols[[row, bi * ho * wo + i * wo + j]] =
                                x[[bi, ci, i + ki, j + kj]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the patch-matrix gradient back onto the input layout.
pub fn col2im3(dcols: &Array2<f64>, b: usize, c: usize, h: usize, w: usize) -> Array4<f64> {
    let (ho, wo) = (h - 2, w - 2);
    let mut dx = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for ki in 0..3 {
                for kj in 0..3 {
                    let row = ci * 9 + ki * 3 + kj;
                    for i in 0..ho {
                        for j in 0..wo {
                            dx[[bi, ci, i + ki, j + kj]] +=
                                dcols[[row, bi * ho * wo + i * wo + j]];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Valid 3x3 convolution. Returns the output `(B, F, Ho, Wo)` together with
/// the unfolded patch matrix, which the backward pass reuses.
pub fn conv3_forward(
    x: &Array4<f64>,
    w: &Array4<f64>,
    bias: &Array1<f64>,
) -> (Array4<f64>, Array2<f64>) {
    let (b, c, h, wd) = x.dim();
    let f = w.dim().0;
    let (ho, wo) = (h - 2, wd - 2);
    let cols = im2col3(x);
    let w2d = w
        .view()
        .into_shape_with_order((f, c * 9))
        .expect("conv weights are contiguous");
    let out2d = w2d.dot(&cols);
    let mut out = Array4::zeros((b, f, ho, wo));
    for bi in 0..b {
        for fi in 0..f {
            for i in 0..ho {
                for j in 0..wo {
                    out[[bi, fi, i, j]] = out2d[[fi, bi * ho * wo + i * wo + j]] + bias[fi];
                }
            }
        }
    }
    (out, cols)
}

/// Gradients of the 3x3 convolution: `(dx, dw, dbias)`.
pub fn conv3_backward(
    cols: &Array2<f64>,
    w: &Array4<f64>,
    d_out: &Array4<f64>,
    input_dim: (usize, usize, usize, usize),
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let (b, c, h, wd) = input_dim;
    let (_, f, ho, wo) = d_out.dim();
    let mut d_out2d = Array2::zeros((f, b * ho * wo));
    for bi in 0..b {
        for fi in 0..f {
            for i in 0..ho {
                for j in 0..wo {
                    d_out2d[[fi, bi * ho * wo + i * wo + j]] = d_out[[bi, fi, i, j]];
                }
            }
        }
    }
    let dw2d = d_out2d.dot(&cols.t());
    let dw = dw2d
        .into_shape_with_order((f, c, 3, 3))
        .expect("same element count");
    let dbias = d_out2d.sum_axis(Axis(1));
    let w2d = w
        .view()
        .into_shape_with_order((f, c * 9))
        .expect("conv weights are contiguous");
    let dcols = w2d.t().dot(&d_out2d);
    let dx = col2im3(&dcols, b, c, h, wd);
    (dx, dw, dbias)
}

/// 2x2 max pooling with stride 2 (trailing odd row/column dropped). Returns
/// the pooled output and, per output cell, the flat 0..4 index of the source
/// pixel inside its window; ties pick the first in row-major order.
pub fn maxpool2_forward(x: &Array4<f64>) -> (Array4<f64>, Array4<u8>) {
    let (b, f, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Array4::zeros((b, f, ho, wo));
    let mut idx = Array4::zeros((b, f, ho, wo));
    for bi in 0..b {
        for fi in 0..f {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_k = 0u8;
                    for ki in 0..2 {
                        for kj in 0..2 {
                            let v = x[[bi, fi, 2 * i + ki, 2 * j + kj]];
                            if v > best {
                                best = v;
                                best_k = (ki * 2 + kj) as u8;
                            }
                        }
                    }
                    out[[bi, fi, i, j]] = best;
                    idx[[bi, fi, i, j]] = best_k;
                }
            }
        }
    }
    (out, idx)
}

/// Route pooled gradients back to the winning input pixels.
pub fn maxpool2_backward(
    d_out: &Array4<f64>,
    idx: &Array4<u8>,
    in_h: usize,
    in_w: usize,
) -> Array4<f64> {
    let (b, f, ho, wo) = d_out.dim();
    let mut dx = Array4::zeros((b, f, in_h, in_w));
    for bi in 0..b {
        for fi in 0..f {
            for i in 0..ho {
                for j in 0..wo {
                    let k = idx[[bi, fi, i, j]] as usize;
                    dx[[bi, fi, 2 * i + k / 2, 2 * j + k % 2]] += d_out[[bi, fi, i, j]];
                }
            }
        }
    }
    dx
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        row.mapv_inplace(|v| v - log_sum);
    }
    out
}

/// Row-wise softmax, computed from the stable log-softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = log_softmax_rows(logits);
    out.mapv_inplace(f64::exp);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn dense_matches_hand_computation() {
        let x = array![[1.0, 2.0]];
        let w = array![[3.0, 4.0], [5.0, 6.0]];
        let b = array![0.5, -0.5];
        let y = dense_forward(&x, &w, &b);
        assert_eq!(y, array![[11.5, 16.5]]);
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let x = Array4::from_shape_fn((2, 2, 5, 6), |(b, c, i, j)| {
            (b * 100 + c * 31 + i * 7 + j) as f64 * 0.1
        });
        let w = Array4::from_shape_fn((3, 2, 3, 3), |(f, c, ki, kj)| {
            ((f + 1) as f64) * 0.01 * (c as f64 + 1.0) * ((ki * 3 + kj) as f64 - 4.0)
        });
        let bias = array![0.1, -0.2, 0.3];
        let (out, _) = conv3_forward(&x, &w, &bias);
        for b in 0..2 {
            for f in 0..3 {
                for i in 0..3 {
                    for j in 0..4 {
                        let mut acc = bias[f];
                        for c in 0..2 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    acc += x[[b, c, i + ki, j + kj]] * w[[f, c, ki, kj]];
                                }
                            }
                        }
                        assert!((out[[b, f, i, j]] - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        use rand::RngExt;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        let x = Array4::from_shape_fn((1, 2, 5, 5), |_| rng.random_range(-1.0..1.0));
        let w = Array4::from_shape_fn((3, 2, 3, 3), |_| rng.random_range(-1.0..1.0));
        let bias = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
        let weights = Array2::from_shape_fn((1 * 3 * 3 * 3, 1), |_| rng.random_range(-1.0..1.0));

        let loss = |x: &Array4<f64>, w: &Array4<f64>, bias: &Array1<f64>| -> f64 {
            let (out, _) = conv3_forward(x, w, bias);
            out.iter()
                .zip(weights.iter())
                .map(|(o, wt)| o * wt)
                .sum()
        };

        let (out, cols) = conv3_forward(&x, &w, &bias);
        let d_out = Array4::from_shape_vec(out.dim(), weights.iter().cloned().collect()).unwrap();
        let (dx, dw, dbias) = conv3_backward(&cols, &w, &d_out, x.dim());

        let step = 1e-6;
        let check = |analytic: f64, f_plus: f64, f_minus: f64| {
            let fd = (f_plus - f_minus) / (2.0 * step);
            assert!(
                (analytic - fd).abs() < 1e-6 * analytic.abs().max(fd.abs()).max(1.0),
                "analytic {analytic} vs fd {fd}"
            );
        };
        for probe in [(0usize, 0usize, 1usize, 2usize), (0, 1, 4, 0), (0, 0, 2, 2)] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[[probe.0, probe.1, probe.2, probe.3]] += step;
            xm[[probe.0, probe.1, probe.2, probe.3]] -= step;
            check(
                dx[[probe.0, probe.1, probe.2, probe.3]],
                loss(&xp, &w, &bias),
                loss(&xm, &w, &bias),
            );
        }
        for probe in [(0usize, 0usize, 0usize, 0usize), (2, 1, 2, 2), (1, 0, 1, 1)] {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[[probe.0, probe.1, probe.2, probe.3]] += step;
            wm[[probe.0, probe.1, probe.2, probe.3]] -= step;
            check(
                dw[[probe.0, probe.1, probe.2, probe.3]],
                loss(&x, &wp, &bias),
                loss(&x, &wm, &bias),
            );
        }
        for f in 0..3 {
            let mut bp = bias.clone();
            let mut bm = bias.clone();
            bp[f] += step;
            bm[f] -= step;
            check(dbias[f], loss(&x, &w, &bp), loss(&x, &w, &bm));
        }
    }

    #[test]
    fn maxpool_picks_first_on_ties_and_routes_gradients() {
        let mut x = Array4::zeros((1, 1, 4, 5));
        x[[0, 0, 0, 0]] = 2.0;
        x[[0, 0, 0, 1]] = 2.0;
        x[[0, 0, 2, 2]] = -1.0;
        x[[0, 0, 3, 3]] = 5.0;
        let (out, idx) = maxpool2_forward(&x);
        assert_eq!(out.dim(), (1, 1, 2, 2));
        assert_eq!(out[[0, 0, 0, 0]], 2.0);
        assert_eq!(idx[[0, 0, 0, 0]], 0, "tie picks the first window cell");
        assert_eq!(out[[0, 0, 1, 1]], 5.0);

        let mut d_out = Array4::zeros((1, 1, 2, 2));
        d_out[[0, 0, 0, 0]] = 1.5;
        d_out[[0, 0, 1, 1]] = -2.0;
        let dx = maxpool2_backward(&d_out, &idx, 4, 5);
        assert_eq!(dx[[0, 0, 0, 0]], 1.5);
        assert_eq!(dx[[0, 0, 3, 3]], -2.0);
        assert_eq!(dx.iter().map(|v| v.abs()).sum::<f64>(), 3.5);
    }

    #[test]
    fn softmax_rows_are_normalized_and_stable() {
        let logits = array![[1000.0, 1001.0, 999.0], [0.0, 0.0, 0.0]];
        let p = softmax_rows(&logits);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|v| v.is_finite()));
        }
        assert!((p[[1, 0]] - 1.0 / 3.0).abs() < 1e-12);
    }
}
