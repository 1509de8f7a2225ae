//! Cross-module property: composing a harmonic perturbation barely moves an
//! image's Laplacian map. The interior change is bounded by the budget times
//! the field's own discrete-Laplacian residual, and sign noise of the same
//! amplitude disturbs the map far more.

use haam::analytic::{BasisFunction, HarmonicModel, HarmonicPart};
use haam::coords::{AffineParams, CoordGrid};
use haam::metrics::laplacian_map;
use haam::perturbation::{compose_adversarial, ImageTensor, PerturbMode, PerturbationConfig};
use ndarray::Array2;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIM: usize = 28;
const EPSILON: f64 = 8.0;

fn smooth_base() -> ImageTensor {
    let center = (DIM as f64 - 1.0) / 2.0;
    ImageTensor::from_gray(Array2::from_shape_fn((DIM, DIM), |(i, j)| {
        let du = (i as f64 - center) / DIM as f64;
        let dv = (j as f64 - center) / DIM as f64;
        130.0 + 70.0 * (-8.0 * (du * du + dv * dv)).exp()
    }))
    .unwrap()
}

fn five_point(values: &Array2<f64>, i: usize, j: usize) -> f64 {
    values[[i - 1, j]] + values[[i + 1, j]] + values[[i, j - 1]] + values[[i, j + 1]]
        - 4.0 * values[[i, j]]
}

fn interior_mean_abs_diff(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let la = &laplacian_map(a)[0];
    let lb = &laplacian_map(b)[0];
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 1..DIM - 1 {
        for j in 1..DIM - 1 {
            sum += (la[[i, j]] - lb[[i, j]]).abs();
            count += 1;
        }
    }
    sum / count as f64
}

#[test]
fn harmonic_perturbation_preserves_laplacian_map_sign_noise_does_not() {
    let base = smooth_base();
    let model = HarmonicModel::new(
        vec![
            BasisFunction::quadratic(0.9, -0.3, 0.2),
            BasisFunction::Sine,
        ],
        vec![1.0, 0.8],
        HarmonicPart::Real,
    )
    .unwrap();
    let affine = AffineParams {
        rotation_cos: 0.92,
        scale_x: 2.4,
        scale_y: 1.7,
        translate_x: 0.2,
        translate_y: -0.1,
    };
    let grid = CoordGrid::normalized(DIM, DIM).unwrap();
    let field = model.evaluate(&affine.apply(&grid)).unwrap();
    let config = PerturbationConfig::new(EPSILON, PerturbMode::Gray, HarmonicPart::Real).unwrap();
    let adversarial = compose_adversarial(&base, std::slice::from_ref(&field), &config).unwrap();

    // The bound only speaks about unclipped compositions; confirm none of
    // the pre-clip values left [0,255].
    let (min, max) = field.min_max();
    let span = max - min;
    assert!(span > 0.0);
    for (&b, &a) in base.pixels().iter().zip(adversarial.pixels()) {
        assert!((a - b).abs() <= EPSILON + 1e-12);
        assert!(b - EPSILON >= 0.0 && b + EPSILON <= 255.0, "clip engaged");
    }

    // Normalization scales the field by 2/span, so the composed Laplacian
    // change is bounded by epsilon * 2/span * max |five-point stencil|.
    let mut max_stencil = 0.0f64;
    for i in 1..DIM - 1 {
        for j in 1..DIM - 1 {
            max_stencil = max_stencil.max(five_point(field.values(), i, j).abs());
        }
    }
    let bound = EPSILON * 2.0 / span * max_stencil;
    let harmonic_change = interior_mean_abs_diff(&base, &adversarial);
    assert!(
        harmonic_change <= bound + 1e-9,
        "harmonic change {harmonic_change} exceeds bound {bound}"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let noisy_pixels = base.pixels().mapv(|v| {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        (v + EPSILON * sign).clamp(0.0, 255.0)
    });
    let noisy = ImageTensor::new(noisy_pixels).unwrap();
    let noise_change = interior_mean_abs_diff(&base, &noisy);
    assert!(
        harmonic_change < noise_change,
        "harmonic {harmonic_change} not below sign noise {noise_change}"
    );
}
