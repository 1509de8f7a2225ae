//! Field normalization, scaling by the intensity budget, adversarial
//! composition, and the backward chain from image-space gradients to
//! field-space gradients.
//!
//! Composition follows `I_dis = clip_[0,255](I + eps * norm(h))` with
//! `norm(h) = (h - h_min) * 2 / (h_max - h_min) - 1`, applied per channel.

use ndarray::{Array2, Array3};

use crate::analytic::{HarmonicPart, ScalarField};
use crate::error::{HaamError, Result};

/// An image as real intensities in `[0,255]`, shape `H x W x C`.
///
/// Values stay real-valued during optimization; quantization to integers
/// happens only at file export.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pixels: Array3<f64>,
}

impl ImageTensor {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h < 2 || w < 2 {
            return Err(HaamError::InvalidDimension(format!(
                "image must be at least 2x2, got {h}x{w}"
            )));
        }
        if c != 1 && c != 3 {
            return Err(HaamError::InvalidDimension(format!(
                "image must have 1 or 3 channels, got {c}"
            )));
        }
        if !pixels.iter().all(|v| (0.0..=255.0).contains(v)) {
            return Err(HaamError::InvalidParameter(
                "pixel intensities must lie in [0,255]".into(),
            ));
        }
        Ok(Self { pixels })
    }

    /// Wrap a single-channel plane as an `H x W x 1` image.
    pub fn from_gray(plane: Array2<f64>) -> Result<Self> {
        let (h, w) = plane.dim();
        Self::new(plane.into_shape_with_order((h, w, 1)).expect("same length"))
    }

    pub fn from_u8(bytes: &Array3<u8>) -> Result<Self> {
        Self::new(bytes.mapv(f64::from))
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.pixels.dim()
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }

    /// One channel as an owned `H x W` plane.
    pub fn plane(&self, channel: usize) -> Array2<f64> {
        self.pixels
            .index_axis(ndarray::Axis(2), channel)
            .to_owned()
    }

    /// Round to integer intensities, halves away from zero.
    pub fn quantized(&self) -> Array3<u8> {
        self.pixels.mapv(|v| v.round() as u8)
    }
}

/// Whether one field is shared across channels or each channel learns its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbMode {
    Gray,
    Color,
}

/// Composition settings: intensity budget, channel mode, harmonic part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationConfig {
    /// Perturbation budget in intensity units, same scale as pixels.
    pub epsilon: f64,
    pub mode: PerturbMode,
    pub part: HarmonicPart,
}

impl PerturbationConfig {
    pub fn new(epsilon: f64, mode: PerturbMode, part: HarmonicPart) -> Result<Self> {
        let config = Self {
            epsilon,
            mode,
            part,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(HaamError::InvalidParameter(format!(
                "epsilon must be a positive real, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// How many fields the mode expects for an image with `channels` planes.
    pub fn field_count(&self, channels: usize) -> usize {
        match self.mode {
            PerturbMode::Gray => 1,
            PerturbMode::Color => channels,
        }
    }
}

/// Map a field affinely onto `[-1,1]` with its min at -1 and max at +1. A
/// constant field maps to the all-zero field.
pub fn normalize_field(h: &ScalarField) -> ScalarField {
    let (min, max) = h.min_max();
    let span = max - min;
    let values = if span > 0.0 {
        h.values().mapv(|v| (v - min) * 2.0 / span - 1.0)
    } else {
        Array2::zeros(h.shape())
    };
    ScalarField::new(values).expect("normalized field is finite")
}

fn check_fields(image: &ImageTensor, fields: &[ScalarField], config: &PerturbationConfig) -> Result<()> {
    config.validate()?;
    let expected = config.field_count(image.channels());
    if fields.len() != expected {
        return Err(HaamError::ShapeMismatch(format!(
            "{:?} mode with {} channels expects {} field(s), got {}",
            config.mode,
            image.channels(),
            expected,
            fields.len()
        )));
    }
    for field in fields {
        if field.shape() != (image.height(), image.width()) {
            return Err(HaamError::ShapeMismatch(format!(
                "field shape {:?} does not match image plane {}x{}",
                field.shape(),
                image.height(),
                image.width()
            )));
        }
    }
    Ok(())
}

/// Compose the adversarial image: per channel `c`,
/// `I_dis[.,.,c] = clip_[0,255](I[.,.,c] + eps * norm(h_c))`, with the single
/// field shared across channels in gray mode.
pub fn compose_adversarial(
    image: &ImageTensor,
    fields: &[ScalarField],
    config: &PerturbationConfig,
) -> Result<ImageTensor> {
    check_fields(image, fields, config)?;
    let normalized: Vec<ScalarField> = fields.iter().map(normalize_field).collect();
    let (h, w, c) = image.shape();
    let mut out = Array3::zeros((h, w, c));
    for ci in 0..c {
        let field = match config.mode {
            PerturbMode::Gray => &normalized[0],
            PerturbMode::Color => &normalized[ci],
        };
        for i in 0..h {
            for j in 0..w {
                let v = image.pixels[[i, j, ci]] + config.epsilon * field.values()[[i, j]];
                out[[i, j, ci]] = v.clamp(0.0, 255.0);
            }
        }
    }
    ImageTensor::new(out)
}

/// Chain image-space gradients `dJ/dI_dis` back to per-field gradients
/// `dJ/dh`, one `H x W` array per input field.
///
/// The clip contributes subgradient 1 where the pre-clip value lies in
/// `[0,255]` and 0 outside; the normalization extrema are treated as
/// constants within the step, so `d norm/d h = 2/(h_max - h_min)`
/// elementwise (zero for a constant field). Gray mode sums channel
/// gradients into the shared field.
pub fn backprop_to_field(
    image: &ImageTensor,
    fields: &[ScalarField],
    config: &PerturbationConfig,
    grad_image: &Array3<f64>,
) -> Result<Vec<Array2<f64>>> {
    check_fields(image, fields, config)?;
    if grad_image.dim() != image.shape() {
        return Err(HaamError::ShapeMismatch(format!(
            "gradient shape {:?} does not match image {:?}",
            grad_image.dim(),
            image.shape()
        )));
    }
    if !grad_image.iter().all(|g| g.is_finite()) {
        return Err(HaamError::InvalidParameter(
            "image gradient must be finite".into(),
        ));
    }
    let normalized: Vec<ScalarField> = fields.iter().map(normalize_field).collect();
    let factors: Vec<f64> = fields
        .iter()
        .map(|f| {
            let (min, max) = f.min_max();
            let span = max - min;
            if span > 0.0 {
                config.epsilon * 2.0 / span
            } else {
                0.0
            }
        })
        .collect();

    let (h, w, c) = image.shape();
    let mut out = vec![Array2::zeros((h, w)); fields.len()];
    for ci in 0..c {
        let fi = match config.mode {
            PerturbMode::Gray => 0,
            PerturbMode::Color => ci,
        };
        for i in 0..h {
            for j in 0..w {
                let pre =
                    image.pixels[[i, j, ci]] + config.epsilon * normalized[fi].values()[[i, j]];
                if (0.0..=255.0).contains(&pre) {
                    out[fi][[i, j]] += grad_image[[i, j, ci]] * factors[fi];
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{BasisFunction, HarmonicModel};
    use crate::coords::{AffineParams, CoordGrid};
    use ndarray::Array2;
    use proptest::prelude::*;

    fn field(values: Array2<f64>) -> ScalarField {
        ScalarField::new(values).unwrap()
    }

    fn gray_config(epsilon: f64) -> PerturbationConfig {
        PerturbationConfig::new(epsilon, PerturbMode::Gray, HarmonicPart::Real).unwrap()
    }

    #[test]
    fn image_invariants_enforced() {
        assert!(ImageTensor::new(Array3::zeros((1, 4, 1))).is_err());
        assert!(ImageTensor::new(Array3::zeros((4, 4, 2))).is_err());
        assert!(ImageTensor::new(Array3::from_elem((4, 4, 1), 256.0)).is_err());
        assert!(ImageTensor::new(Array3::from_elem((4, 4, 1), -0.5)).is_err());
        assert!(ImageTensor::new(Array3::from_elem((4, 4, 3), 255.0)).is_ok());
    }

    #[test]
    fn normalize_maps_extremes_and_midpoint() {
        let h = field(ndarray::array![[-2.0, 0.0], [2.0, 1.0]]);
        let n = normalize_field(&h);
        assert_eq!(n.values()[[0, 0]], -1.0);
        assert_eq!(n.values()[[0, 1]], 0.0);
        assert_eq!(n.values()[[1, 0]], 1.0);
        assert_eq!(n.values()[[1, 1]], 0.5);
    }

    #[test]
    fn normalize_constant_field_is_zero() {
        let h = field(Array2::from_elem((3, 5), 7.0));
        let n = normalize_field(&h);
        assert!(n.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_field_composes_to_identity() {
        let image = ImageTensor::new(Array3::from_elem((3, 3, 1), 120.0)).unwrap();
        let h = field(Array2::from_elem((3, 3), 7.0));
        let out = compose_adversarial(&image, &[h], &gray_config(24.0)).unwrap();
        assert_eq!(out, image);
    }

    #[test]
    fn clip_caps_bright_pixels() {
        let image = ImageTensor::new(Array3::from_elem((2, 2, 1), 250.0)).unwrap();
        let h = field(ndarray::array![[0.0, 1.0], [0.5, 0.0]]);
        let out = compose_adversarial(&image, &[h], &gray_config(24.0)).unwrap();
        // Normalized max is +1: 250 + 24 = 274 clips to 255.
        assert_eq!(out.pixels()[[0, 1, 0]], 255.0);
        // Normalized min is -1: 250 - 24 = 226.
        assert_eq!(out.pixels()[[0, 0, 0]], 226.0);
    }

    #[test]
    fn gray_mode_shares_the_delta_across_channels() {
        let image = ImageTensor::new(Array3::from_elem((3, 4, 3), 100.0)).unwrap();
        let values = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64);
        let out = compose_adversarial(&image, &[field(values)], &gray_config(8.0)).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let d0 = out.pixels()[[i, j, 0]] - 100.0;
                assert_eq!(out.pixels()[[i, j, 1]] - 100.0, d0);
                assert_eq!(out.pixels()[[i, j, 2]] - 100.0, d0);
            }
        }
    }

    #[test]
    fn field_count_and_shape_checked() {
        let image = ImageTensor::new(Array3::from_elem((3, 3, 3), 10.0)).unwrap();
        let h = field(Array2::zeros((3, 3)));
        let color =
            PerturbationConfig::new(4.0, PerturbMode::Color, HarmonicPart::Real).unwrap();
        assert!(compose_adversarial(&image, &[h.clone()], &color).is_err());
        assert!(compose_adversarial(
            &image,
            &[h.clone(), h.clone(), field(Array2::zeros((2, 3)))],
            &color
        )
        .is_err());
        assert!(compose_adversarial(&image, &[h.clone(), h.clone(), h], &color).is_ok());
    }

    #[test]
    fn clipped_pixels_block_the_gradient() {
        let image = ImageTensor::new(Array3::from_elem((2, 2, 1), 250.0)).unwrap();
        let h = field(ndarray::array![[0.0, 1.0], [0.5, 0.25]]);
        let grads = backprop_to_field(
            &image,
            &[h],
            &gray_config(24.0),
            &Array3::from_elem((2, 2, 1), 1.0),
        )
        .unwrap();
        // Pre-clip 274 at the max pixel: clip subgradient zero.
        assert_eq!(grads[0][[0, 1]], 0.0);
        // Unclipped pixel passes eps * 2 / span = 24 * 2 / 1 = 48.
        assert_eq!(grads[0][[1, 0]], 48.0);
    }

    #[test]
    fn gray_mode_sums_channel_gradients() {
        let image = ImageTensor::new(Array3::from_elem((2, 2, 3), 100.0)).unwrap();
        let h = field(ndarray::array![[0.0, 4.0], [2.0, 1.0]]);
        let mut grad = Array3::zeros((2, 2, 3));
        grad[[1, 0, 0]] = 1.0;
        grad[[1, 0, 1]] = 2.0;
        grad[[1, 0, 2]] = 3.0;
        let grads =
            backprop_to_field(&image, &[h], &gray_config(8.0), &grad).unwrap();
        // (g1+g2+g3) * eps * 2 / (h_max - h_min) = 6 * 8 * 2 / 4 = 24.
        assert_eq!(grads[0][[1, 0]], 24.0);
        assert_eq!(grads[0][[0, 0]], 0.0);
    }

    #[test]
    fn constant_field_gets_zero_gradient() {
        let image = ImageTensor::new(Array3::from_elem((2, 2, 1), 100.0)).unwrap();
        let h = field(Array2::from_elem((2, 2), 3.0));
        let grads = backprop_to_field(
            &image,
            &[h],
            &gray_config(8.0),
            &Array3::from_elem((2, 2, 1), 5.0),
        )
        .unwrap();
        assert!(grads[0].iter().all(|&g| g == 0.0));
    }

    /// Central finite differences of the composed scalar loss with respect to
    /// every harmonic parameter, with the normalization extrema frozen at
    /// their base values to mirror the detached backward pass.
    #[test]
    fn parameter_gradients_match_composed_finite_differences() {
        use rand::RngExt;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let (height, width) = (9, 8);
        let base_grid = CoordGrid::normalized(height, width).unwrap();

        for trial in 0..20 {
            let mut model = HarmonicModel::new(
                vec![
                    BasisFunction::quadratic(
                        rng.random_range(-1.5..1.5),
                        rng.random_range(-1.5..1.5),
                        rng.random_range(-1.5..1.5),
                    ),
                    BasisFunction::Sine,
                ],
                vec![rng.random_range(0.5..1.5), rng.random_range(0.5..1.5)],
                if trial % 2 == 0 {
                    HarmonicPart::Real
                } else {
                    HarmonicPart::Imaginary
                },
            )
            .unwrap();
            let affine = AffineParams {
                rotation_cos: rng.random_range(-0.9..0.9),
                scale_x: rng.random_range(0.5..3.0),
                scale_y: rng.random_range(0.5..3.0),
                translate_x: rng.random_range(-0.5..0.5),
                translate_y: rng.random_range(-0.5..0.5),
            };
            let grid = affine.apply(&base_grid);

            // Interior intensities and a modest budget keep every pixel away
            // from the clip boundaries.
            let image = ImageTensor::new(Array3::from_shape_fn(
                (height, width, 1),
                |_| rng.random_range(60.0..190.0),
            ))
            .unwrap();
            let config = gray_config(8.0);
            let loss_weights =
                Array3::from_shape_fn((height, width, 1), |_| rng.random_range(-1.0..1.0));

            let h0 = model.evaluate(&grid).unwrap();
            let (min0, max0) = h0.min_max();
            let span = max0 - min0;
            assert!(span > 1e-6, "degenerate field in trial {trial}");

            let field_grad =
                backprop_to_field(&image, &[h0.clone()], &config, &loss_weights).unwrap();
            let param_fields = model.parameter_gradients(&grid).unwrap();
            let analytic: Vec<f64> = param_fields
                .iter()
                .map(|pf| {
                    pf.values()
                        .iter()
                        .zip(field_grad[0].iter())
                        .map(|(a, b)| a * b)
                        .sum()
                })
                .collect();

            let frozen_loss = |m: &HarmonicModel| -> f64 {
                let h = m.evaluate(&grid).unwrap();
                let mut loss = 0.0;
                for i in 0..height {
                    for j in 0..width {
                        let n = (h.values()[[i, j]] - min0) * 2.0 / span - 1.0;
                        let v = (image.pixels()[[i, j, 0]] + config.epsilon * n)
                            .clamp(0.0, 255.0);
                        loss += loss_weights[[i, j, 0]] * v;
                    }
                }
                loss
            };

            let step = 1e-4;
            let base = model.params();
            for p in 0..model.param_count() {
                let mut plus = base.clone();
                let mut minus = base.clone();
                plus[p] += step;
                minus[p] -= step;
                model.set_params(&plus).unwrap();
                let j_plus = frozen_loss(&model);
                model.set_params(&minus).unwrap();
                let j_minus = frozen_loss(&model);
                model.set_params(&base).unwrap();
                let fd = (j_plus - j_minus) / (2.0 * step);
                let scale = analytic[p].abs().max(fd.abs());
                if scale > 1e-6 {
                    assert!(
                        (analytic[p] - fd).abs() / scale < 1e-3,
                        "trial {trial} param {p}: analytic {} vs fd {fd}",
                        analytic[p]
                    );
                } else {
                    assert!((analytic[p] - fd).abs() < 1e-6);
                }
            }
        }
    }

    fn compose_inputs() -> impl Strategy<Value = (Array3<f64>, Array2<f64>, f64)> {
        (2usize..7, 2usize..7, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(
            |(h, w, c)| {
                (
                    proptest::collection::vec(0.0..=255.0f64, h * w * c),
                    proptest::collection::vec(-50.0..50.0f64, h * w),
                    0.5..32.0f64,
                )
                    .prop_map(move |(img, fld, eps)| {
                        (
                            Array3::from_shape_vec((h, w, c), img).unwrap(),
                            Array2::from_shape_vec((h, w), fld).unwrap(),
                            eps,
                        )
                    })
            },
        )
    }

    proptest! {
        #[test]
        fn normalized_fields_span_unit_interval((_, fld, _) in compose_inputs()) {
            let n = normalize_field(&field(fld));
            let (min, max) = n.min_max();
            prop_assert!(n.values().iter().all(|v| (-1.0..=1.0).contains(v)));
            // Random fields are never constant in practice; extremes hit.
            prop_assert!((min + 1.0).abs() < 1e-12 && (max - 1.0).abs() < 1e-12);
        }

        #[test]
        fn composition_respects_budget_and_range((img, fld, eps) in compose_inputs()) {
            let image = ImageTensor::new(img).unwrap();
            let h = field(fld);
            let fields = vec![h];
            let out = compose_adversarial(&image, &fields, &gray_config(eps)).unwrap();
            for (o, i) in out.pixels().iter().zip(image.pixels().iter()) {
                prop_assert!((0.0..=255.0).contains(o));
                prop_assert!((o - i).abs() <= eps + 1e-9);
            }
        }

        #[test]
        fn larger_budget_changes_a_superset_of_pixels((img, fld, eps) in compose_inputs()) {
            let image = ImageTensor::new(img).unwrap();
            let fields = vec![field(fld)];
            let small = compose_adversarial(&image, &fields, &gray_config(eps)).unwrap();
            let large = compose_adversarial(&image, &fields, &gray_config(eps * 2.0)).unwrap();
            for ((s, l), i) in small
                .pixels()
                .iter()
                .zip(large.pixels().iter())
                .zip(image.pixels().iter())
            {
                if s != i {
                    prop_assert!(l != i, "pixel changed at eps but not at 2*eps");
                    prop_assert!((l - i).abs() >= (s - i).abs() - 1e-9);
                }
            }
        }
    }
}
