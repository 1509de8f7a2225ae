//! Built-in differentiable classifiers: forward logits, predictions, the
//! adversarial log-probability loss with exact input gradients, single-step
//! sign attacks, and desk-scale training.
//!
//! Two deliberately different architectures are provided so transfer
//! experiments compare models with distinct inductive biases:
//!
//! - `mlp_small`: flatten, dense(256), ReLU, dense(classes)
//! - `cnn_small`: conv3x3(16), ReLU, maxpool2, conv3x3(32), ReLU, maxpool2,
//!   flatten, dense(classes)
//!
//! Pixels are scaled to `[0,1]` inside the model; input gradients are
//! reported in `[0,255]` intensity units so they chain directly into the
//! perturbation pipeline.

mod layers;
mod train;

pub use train::{accuracy, disagreement_rate, train, TrainConfig, TrainReport};

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, ArrayViewD, ArrayViewMutD, Axis};
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{HaamError, Result};
use crate::perturbation::ImageTensor;
use layers::{
    conv3_backward, conv3_forward, dense_backward, dense_forward, log_softmax_rows,
    maxpool2_backward, maxpool2_forward, relu, relu_backward, softmax_rows,
};

const MLP_HIDDEN: usize = 256;
const CONV1_FILTERS: usize = 16;
const CONV2_FILTERS: usize = 32;

/// The two supported architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    MlpSmall,
    CnnSmall,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::MlpSmall => "mlp_small",
            Architecture::CnnSmall => "cnn_small",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "mlp_small" => Ok(Architecture::MlpSmall),
            "cnn_small" => Ok(Architecture::CnnSmall),
            other => Err(HaamError::InvalidParameter(format!(
                "unknown architecture '{other}' (expected mlp_small or cnn_small)"
            ))),
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct MlpParams {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct CnnParams {
    conv1_w: Array4<f64>,
    conv1_b: Array1<f64>,
    conv2_w: Array4<f64>,
    conv2_b: Array1<f64>,
    fc_w: Array2<f64>,
    fc_b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
enum ModelParams {
    Mlp(MlpParams),
    Cnn(CnnParams),
}

/// A classifier: architecture tag, expected input shape `(H, W, C)`, class
/// count, and all layer parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    architecture: Architecture,
    input_shape: (usize, usize, usize),
    num_classes: usize,
    params: ModelParams,
}

/// Adversarial loss `J = log p(y | image)` and its exact input gradient in
/// `[0,255]` intensity units.
#[derive(Debug, Clone)]
pub struct LossAndGrad {
    pub loss: f64,
    pub input_grad: Array3<f64>,
}

/// Per-layer activations captured by the batched forward pass, consumed by
/// [`ModelSpec::backward_batch`].
pub(crate) enum ForwardTrace {
    Mlp {
        x: Array2<f64>,
        h1: Array2<f64>,
    },
    Cnn {
        input_dim1: (usize, usize, usize, usize),
        cols1: Array2<f64>,
        a1: Array4<f64>,
        idx1: Array4<u8>,
        input_dim2: (usize, usize, usize, usize),
        cols2: Array2<f64>,
        a2: Array4<f64>,
        idx2: Array4<u8>,
        flat: Array2<f64>,
    },
}

/// Parameter gradients (same order as [`ModelSpec::param_arrays`]) and the
/// gradient with respect to the scaled `(B, H, W, C)` input batch.
pub(crate) struct BackwardResult {
    pub param_grads: Vec<ArrayD<f64>>,
    pub input_grad: Array4<f64>,
}

fn cnn_feature_dims(h: usize, w: usize) -> Result<((usize, usize), (usize, usize), usize)> {
    if h < 10 || w < 10 {
        return Err(HaamError::InvalidDimension(format!(
            "cnn_small needs at least a 10x10 input, got {h}x{w}"
        )));
    }
    let (h1, w1) = ((h - 2) / 2, (w - 2) / 2);
    let (h2, w2) = ((h1 - 2) / 2, (w1 - 2) / 2);
    Ok(((h1, w1), (h2, w2), CONV2_FILTERS * h2 * w2))
}

fn he_uniform(rng: &mut ChaCha8Rng, fan_in: usize, shape: &[usize]) -> ArrayD<f64> {
    let limit = (6.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(shape, |_| rng.random_range(-limit..limit))
}

impl ModelSpec {
    /// Randomly initialized model: hidden layers use He-uniform weights, the
    /// final layer starts at zero so an untrained model predicts uniformly.
    pub fn init(
        architecture: Architecture,
        input_shape: (usize, usize, usize),
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let (h, w, c) = input_shape;
        if h < 2 || w < 2 || (c != 1 && c != 3) {
            return Err(HaamError::InvalidDimension(format!(
                "unsupported input shape {input_shape:?}"
            )));
        }
        if num_classes < 2 {
            return Err(HaamError::InvalidParameter(
                "need at least two classes".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = match architecture {
            Architecture::MlpSmall => {
                let d = h * w * c;
                ModelParams::Mlp(MlpParams {
                    w1: he_uniform(&mut rng, d, &[MLP_HIDDEN, d])
                        .into_dimensionality()
                        .unwrap(),
                    b1: Array1::zeros(MLP_HIDDEN),
                    w2: Array2::zeros((num_classes, MLP_HIDDEN)),
                    b2: Array1::zeros(num_classes),
                })
            }
            Architecture::CnnSmall => {
                let (_, _, flat) = cnn_feature_dims(h, w)?;
                ModelParams::Cnn(CnnParams {
                    conv1_w: he_uniform(&mut rng, c * 9, &[CONV1_FILTERS, c, 3, 3])
                        .into_dimensionality()
                        .unwrap(),
                    conv1_b: Array1::zeros(CONV1_FILTERS),
                    conv2_w: he_uniform(
                        &mut rng,
                        CONV1_FILTERS * 9,
                        &[CONV2_FILTERS, CONV1_FILTERS, 3, 3],
                    )
                    .into_dimensionality()
                    .unwrap(),
                    conv2_b: Array1::zeros(CONV2_FILTERS),
                    fc_w: Array2::zeros((num_classes, flat)),
                    fc_b: Array1::zeros(num_classes),
                })
            }
        };
        Ok(Self {
            architecture,
            input_shape,
            num_classes,
            params,
        })
    }

    /// Rebuild a model from raw parameter arrays in [`Self::param_arrays`]
    /// order, validating shapes and finiteness.
    pub fn from_arrays(
        architecture: Architecture,
        input_shape: (usize, usize, usize),
        num_classes: usize,
        arrays: Vec<ArrayD<f64>>,
    ) -> Result<Self> {
        let mut model = Self::init(architecture, input_shape, num_classes, 0)?;
        let expected: Vec<Vec<usize>> = model
            .param_arrays()
            .iter()
            .map(|a| a.shape().to_vec())
            .collect();
        if arrays.len() != expected.len() {
            return Err(HaamError::CheckpointParse(format!(
                "{} expects {} parameter arrays, got {}",
                architecture,
                expected.len(),
                arrays.len()
            )));
        }
        for (i, (arr, shape)) in arrays.iter().zip(&expected).enumerate() {
            if arr.shape() != shape.as_slice() {
                return Err(HaamError::CheckpointParse(format!(
                    "parameter array {i} has shape {:?}, expected {shape:?}",
                    arr.shape()
                )));
            }
            if !arr.iter().all(|v| v.is_finite()) {
                return Err(HaamError::CheckpointParse(format!(
                    "parameter array {i} contains non-finite values"
                )));
            }
        }
        for (dst, src) in model.param_arrays_mut().into_iter().zip(arrays) {
            let mut dst = dst;
            dst.assign(&src);
        }
        Ok(model)
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Views of every parameter array. Order: dense/conv weights then biases,
    /// input side first.
    pub fn param_arrays(&self) -> Vec<ArrayViewD<'_, f64>> {
        match &self.params {
            ModelParams::Mlp(p) => vec![
                p.w1.view().into_dyn(),
                p.b1.view().into_dyn(),
                p.w2.view().into_dyn(),
                p.b2.view().into_dyn(),
            ],
            ModelParams::Cnn(p) => vec![
                p.conv1_w.view().into_dyn(),
                p.conv1_b.view().into_dyn(),
                p.conv2_w.view().into_dyn(),
                p.conv2_b.view().into_dyn(),
                p.fc_w.view().into_dyn(),
                p.fc_b.view().into_dyn(),
            ],
        }
    }

    pub(crate) fn param_arrays_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        match &mut self.params {
            ModelParams::Mlp(p) => vec![
                p.w1.view_mut().into_dyn(),
                p.b1.view_mut().into_dyn(),
                p.w2.view_mut().into_dyn(),
                p.b2.view_mut().into_dyn(),
            ],
            ModelParams::Cnn(p) => vec![
                p.conv1_w.view_mut().into_dyn(),
                p.conv1_b.view_mut().into_dyn(),
                p.conv2_w.view_mut().into_dyn(),
                p.conv2_b.view_mut().into_dyn(),
                p.fc_w.view_mut().into_dyn(),
                p.fc_b.view_mut().into_dyn(),
            ],
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_arrays().iter().map(|a| a.len()).sum()
    }

    fn check_image(&self, image: &ImageTensor) -> Result<()> {
        if image.shape() != self.input_shape {
            return Err(HaamError::ShapeMismatch(format!(
                "model expects input {:?}, got {:?}",
                self.input_shape,
                image.shape()
            )));
        }
        Ok(())
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.num_classes {
            return Err(HaamError::InvalidLabel {
                label,
                num_classes: self.num_classes,
            });
        }
        Ok(())
    }

    /// Scale one image into a `(1, H, W, C)` batch in `[0,1]`.
    fn to_batch(&self, image: &ImageTensor) -> Array4<f64> {
        let (h, w, c) = self.input_shape;
        let mut x = Array4::zeros((1, h, w, c));
        x.index_axis_mut(Axis(0), 0)
            .assign(&image.pixels().mapv(|v| v / 255.0));
        x
    }

    /// Batched forward pass over `(B, H, W, C)` inputs scaled to `[0,1]`.
    pub(crate) fn forward_batch(&self, x: &Array4<f64>) -> (Array2<f64>, ForwardTrace) {
        let (b, h, w, c) = x.dim();
        match &self.params {
            ModelParams::Mlp(p) => {
                let flat = x
                    .view()
                    .into_shape_with_order((b, h * w * c))
                    .expect("batch is contiguous")
                    .to_owned();
                let mut h1 = dense_forward(&flat, &p.w1, &p.b1);
                relu(h1.as_slice_mut().expect("standard layout"));
                let logits = dense_forward(&h1, &p.w2, &p.b2);
                (logits, ForwardTrace::Mlp { x: flat, h1 })
            }
            ModelParams::Cnn(p) => {
                let xc = x.clone().permuted_axes([0, 3, 1, 2]).as_standard_layout().to_owned();
                let input_dim1 = xc.dim();
                let (mut a1, cols1) = conv3_forward(&xc, &p.conv1_w, &p.conv1_b);
                relu(a1.as_slice_mut().expect("standard layout"));
                let (p1, idx1) = maxpool2_forward(&a1);
                let input_dim2 = p1.dim();
                let (mut a2, cols2) = conv3_forward(&p1, &p.conv2_w, &p.conv2_b);
                relu(a2.as_slice_mut().expect("standard layout"));
                let (p2, idx2) = maxpool2_forward(&a2);
                let (pb, pf, ph, pw) = p2.dim();
                let flat = p2
                    .into_shape_with_order((pb, pf * ph * pw))
                    .expect("pool output is contiguous");
                let logits = dense_forward(&flat, &p.fc_w, &p.fc_b);
                (
                    logits,
                    ForwardTrace::Cnn {
                        input_dim1,
                        cols1,
                        a1,
                        idx1,
                        input_dim2,
                        cols2,
                        a2,
                        idx2,
                        flat,
                    },
                )
            }
        }
    }

    /// Backpropagate `d_logits` through the trace; the returned input grad is
    /// with respect to the scaled `[0,1]` input, in `(B, H, W, C)` layout.
    pub(crate) fn backward_batch(
        &self,
        trace: &ForwardTrace,
        d_logits: &Array2<f64>,
    ) -> BackwardResult {
        let (hh, ww, cc) = self.input_shape;
        match (&self.params, trace) {
            (ModelParams::Mlp(p), ForwardTrace::Mlp { x, h1 }) => {
                let (mut dh1, dw2, db2) = dense_backward(h1, &p.w2, d_logits);
                relu_backward(
                    h1.as_slice().expect("standard layout"),
                    dh1.as_slice_mut().expect("standard layout"),
                );
                let (dx, dw1, db1) = dense_backward(x, &p.w1, &dh1);
                let b = dx.dim().0;
                let input_grad = dx
                    .into_shape_with_order((b, hh, ww, cc))
                    .expect("same element count");
                BackwardResult {
                    param_grads: vec![
                        dw1.into_dyn(),
                        db1.into_dyn(),
                        dw2.into_dyn(),
                        db2.into_dyn(),
                    ],
                    input_grad,
                }
            }
            (
                ModelParams::Cnn(p),
                ForwardTrace::Cnn {
                    input_dim1,
                    cols1,
                    a1,
                    idx1,
                    input_dim2,
                    cols2,
                    a2,
                    idx2,
                    flat,
                },
            ) => {
                let (dflat, dfc_w, dfc_b) = dense_backward(flat, &p.fc_w, d_logits);
                let (b, f2, h2, w2) = (
                    idx2.dim().0,
                    idx2.dim().1,
                    idx2.dim().2,
                    idx2.dim().3,
                );
                let dp2 = dflat
                    .into_shape_with_order((b, f2, h2, w2))
                    .expect("same element count");
                let mut da2 = maxpool2_backward(&dp2, idx2, a2.dim().2, a2.dim().3);
                relu_backward(
                    a2.as_slice().expect("standard layout"),
                    da2.as_slice_mut().expect("standard layout"),
                );
                let (dp1, dconv2_w, dconv2_b) =
                    conv3_backward(cols2, &p.conv2_w, &da2, *input_dim2);
                let mut da1 = maxpool2_backward(&dp1, idx1, a1.dim().2, a1.dim().3);
                relu_backward(
                    a1.as_slice().expect("standard layout"),
                    da1.as_slice_mut().expect("standard layout"),
                );
                let (dxc, dconv1_w, dconv1_b) =
                    conv3_backward(cols1, &p.conv1_w, &da1, *input_dim1);
                let input_grad = dxc
                    .permuted_axes([0, 2, 3, 1])
                    .as_standard_layout()
                    .to_owned();
                BackwardResult {
                    param_grads: vec![
                        dconv1_w.into_dyn(),
                        dconv1_b.into_dyn(),
                        dconv2_w.into_dyn(),
                        dconv2_b.into_dyn(),
                        dfc_w.into_dyn(),
                        dfc_b.into_dyn(),
                    ],
                    input_grad,
                }
            }
            _ => unreachable!("trace built by the same model"),
        }
    }

    /// Logits for one image.
    pub fn forward(&self, image: &ImageTensor) -> Result<Array1<f64>> {
        self.check_image(image)?;
        let (logits, _) = self.forward_batch(&self.to_batch(image));
        Ok(logits.index_axis(Axis(0), 0).to_owned())
    }

    /// Softmax probabilities for one image.
    pub fn probabilities(&self, image: &ImageTensor) -> Result<Array1<f64>> {
        self.check_image(image)?;
        let (logits, _) = self.forward_batch(&self.to_batch(image));
        Ok(softmax_rows(&logits).index_axis(Axis(0), 0).to_owned())
    }

    /// Argmax class; ties break toward the lowest index.
    pub fn predict(&self, image: &ImageTensor) -> Result<usize> {
        let logits = self.forward(image)?;
        Ok(argmax(logits.as_slice().expect("standard layout")))
    }

    /// Batched predictions over `(B, H, W, C)` pixels in `[0,255]`.
    pub fn predict_batch(&self, images: &Array4<f64>) -> Result<Vec<usize>> {
        let (_, h, w, c) = images.dim();
        if (h, w, c) != self.input_shape {
            return Err(HaamError::ShapeMismatch(format!(
                "model expects input {:?}, got ({h}, {w}, {c})",
                self.input_shape
            )));
        }
        let x = images.mapv(|v| v / 255.0);
        let (logits, _) = self.forward_batch(&x);
        Ok(logits
            .rows()
            .into_iter()
            .map(|row| argmax(row.as_slice().expect("standard layout")))
            .collect())
    }

    /// `J = log p(label | image)` and its exact gradient with respect to the
    /// image in `[0,255]` units.
    pub fn loss_and_input_grad(&self, image: &ImageTensor, label: usize) -> Result<LossAndGrad> {
        self.check_image(image)?;
        self.check_label(label)?;
        let x = self.to_batch(image);
        let (logits, trace) = self.forward_batch(&x);
        let log_probs = log_softmax_rows(&logits);
        let loss = log_probs[[0, label]];
        // dJ/dlogit_k for J = log p(y) is onehot(y) - softmax.
        let mut d_logits = log_probs.mapv(|v| -v.exp());
        d_logits[[0, label]] += 1.0;
        let back = self.backward_batch(&trace, &d_logits);
        let (h, w, c) = self.input_shape;
        let input_grad = back
            .input_grad
            .index_axis(Axis(0), 0)
            .to_owned()
            .into_shape_with_order((h, w, c))
            .expect("same element count")
            .mapv(|v| v / 255.0);
        Ok(LossAndGrad { loss, input_grad })
    }

    /// Single-step sign attack descending `J = log p(label)`:
    /// `I_adv = clip_[0,255](I - eps * sign(dJ/dI))`, with `sign(0) = 0`.
    pub fn fgsm_attack(
        &self,
        image: &ImageTensor,
        label: usize,
        epsilon: f64,
    ) -> Result<ImageTensor> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(HaamError::InvalidParameter(format!(
                "epsilon must be a finite non-negative real, got {epsilon}"
            )));
        }
        let grad = self.loss_and_input_grad(image, label)?.input_grad;
        let mut out = image.pixels().clone();
        for (v, g) in out.iter_mut().zip(grad.iter()) {
            let sign = if *g > 0.0 {
                1.0
            } else if *g < 0.0 {
                -1.0
            } else {
                0.0
            };
            *v = (*v - epsilon * sign).clamp(0.0, 255.0);
        }
        ImageTensor::new(out)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn image_28(fill: impl Fn(usize, usize) -> f64) -> ImageTensor {
        ImageTensor::new(Array3::from_shape_fn((28, 28, 1), |(i, j, _)| fill(i, j))).unwrap()
    }

    fn random_image(rng: &mut ChaCha8Rng) -> ImageTensor {
        ImageTensor::new(Array3::from_shape_fn((28, 28, 1), |_| {
            rng.random_range(0.0..=255.0)
        }))
        .unwrap()
    }

    fn random_model(architecture: Architecture, seed: u64) -> ModelSpec {
        // Perturb the zero-initialized head so logits are informative.
        let mut model = ModelSpec::init(architecture, (28, 28, 1), 10, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for mut arr in model.param_arrays_mut() {
            if arr.iter().all(|&v| v == 0.0) {
                arr.mapv_inplace(|_| rng.random_range(-0.2..0.2));
            }
        }
        model
    }

    #[test]
    fn forward_is_deterministic_and_normalized() {
        let model = random_model(Architecture::CnnSmall, 3);
        let image = image_28(|i, j| ((i * 13 + j * 7) % 251) as f64);
        let a = model.forward(&image).unwrap();
        let b = model.forward(&image).unwrap();
        assert_eq!(a, b);
        let p = model.probabilities(&image).unwrap();
        assert!((p.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        for arch in [Architecture::MlpSmall, Architecture::CnnSmall] {
            let model = ModelSpec::init(arch, (28, 28, 1), 10, 1).unwrap();
            let image = image_28(|i, j| ((i + j) % 256) as f64);
            let p = model.probabilities(&image).unwrap();
            for v in p.iter() {
                assert!((v - 0.1).abs() < 1e-12);
            }
            let lg = model.loss_and_input_grad(&image, 4).unwrap();
            assert!((lg.loss - 0.1f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_breaks_ties_low_and_ignores_offsets() {
        assert_eq!(argmax(&[0.1, 2.3, -1.0]), 1);
        assert_eq!(argmax(&[1.0, 1.0, 0.0]), 0);

        let model = random_model(Architecture::MlpSmall, 5);
        let image = image_28(|i, j| ((i * j) % 256) as f64);
        let logits = model.forward(&image).unwrap();
        let shifted = logits.mapv(|v| v + 123.456);
        assert_eq!(
            argmax(logits.as_slice().unwrap()),
            argmax(shifted.as_slice().unwrap())
        );
    }

    #[test]
    fn rejects_bad_shapes_and_labels() {
        let model = random_model(Architecture::MlpSmall, 5);
        let wrong = ImageTensor::new(Array3::zeros((14, 14, 1))).unwrap();
        assert!(matches!(
            model.forward(&wrong),
            Err(HaamError::ShapeMismatch(_))
        ));
        let image = image_28(|_, _| 0.0);
        assert!(matches!(
            model.loss_and_input_grad(&image, 10),
            Err(HaamError::InvalidLabel { label: 10, .. })
        ));
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for arch in [Architecture::MlpSmall, Architecture::CnnSmall] {
            let model = random_model(arch, 11);
            for probe in 0..50 {
                let image = random_image(&mut rng);
                let label = rng.random_range(0..10);
                let lg = model.loss_and_input_grad(&image, label).unwrap();
                let i = rng.random_range(0..28);
                let j = rng.random_range(0..28);
                // The net is piecewise smooth (ReLU, maxpool); a small step
                // stays inside one linear piece.
                let step = 1e-5;
                let mut plus = image.pixels().clone();
                let mut minus = image.pixels().clone();
                plus[[i, j, 0]] = (plus[[i, j, 0]] + step).min(255.0);
                minus[[i, j, 0]] = (minus[[i, j, 0]] - step).max(0.0);
                let span = plus[[i, j, 0]] - minus[[i, j, 0]];
                if span < step {
                    continue;
                }
                let jp = model
                    .loss_and_input_grad(&ImageTensor::new(plus).unwrap(), label)
                    .unwrap()
                    .loss;
                let jm = model
                    .loss_and_input_grad(&ImageTensor::new(minus).unwrap(), label)
                    .unwrap()
                    .loss;
                let fd = (jp - jm) / span;
                let analytic = lg.input_grad[[i, j, 0]];
                let scale = analytic.abs().max(fd.abs());
                if scale > 1e-9 {
                    assert!(
                        (analytic - fd).abs() / scale < 1e-4,
                        "{arch} probe {probe}: analytic {analytic} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn fgsm_respects_budget_and_conventions() {
        let model = random_model(Architecture::CnnSmall, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let image = random_image(&mut rng);
        let label = model.predict(&image).unwrap();

        let same = model.fgsm_attack(&image, label, 0.0).unwrap();
        assert_eq!(&same, &image);

        let eps = 8.0;
        let adv = model.fgsm_attack(&image, label, eps).unwrap();
        for (a, i) in adv.pixels().iter().zip(image.pixels().iter()) {
            assert!((a - i).abs() <= eps + 1e-9);
            assert!((0.0..=255.0).contains(a));
        }
        // The sign step reduces log p(label) when the gradient is nonzero.
        let before = model.loss_and_input_grad(&image, label).unwrap().loss;
        let after = model.loss_and_input_grad(&adv, label).unwrap().loss;
        assert!(after < before);
    }

    #[test]
    fn architectures_have_distinct_parameter_counts() {
        let mlp = ModelSpec::init(Architecture::MlpSmall, (28, 28, 1), 10, 1).unwrap();
        let cnn = ModelSpec::init(Architecture::CnnSmall, (28, 28, 1), 10, 1).unwrap();
        assert_ne!(mlp.param_count(), cnn.param_count());
        // flatten 784 -> 256 -> 10.
        assert_eq!(mlp.param_count(), 784 * 256 + 256 + 256 * 10 + 10);
        // conv 16 then 32 filters, fc from 32*5*5.
        assert_eq!(
            cnn.param_count(),
            16 * 9 + 16 + 32 * 16 * 9 + 32 + 10 * 800 + 10
        );
    }

    #[test]
    fn from_arrays_round_trips_and_validates() {
        let model = random_model(Architecture::CnnSmall, 33);
        let arrays: Vec<ArrayD<f64>> = model
            .param_arrays()
            .iter()
            .map(|v| v.to_owned())
            .collect();
        let rebuilt =
            ModelSpec::from_arrays(Architecture::CnnSmall, (28, 28, 1), 10, arrays.clone())
                .unwrap();
        assert_eq!(&rebuilt, &model);

        let mut wrong = arrays.clone();
        wrong.pop();
        assert!(ModelSpec::from_arrays(Architecture::CnnSmall, (28, 28, 1), 10, wrong).is_err());

        let mut bad = arrays;
        bad[0][[0, 0, 0, 0].as_slice()] = f64::NAN;
        assert!(ModelSpec::from_arrays(Architecture::CnnSmall, (28, 28, 1), 10, bad).is_err());
    }
}
