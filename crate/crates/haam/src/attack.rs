//! The HAAM optimization loop: gradient descent on the adversarial loss
//! `J = log p(y | I_dis)` over harmonic parameters `P_h` and affine
//! parameters `P_a`, with early stopping on misclassification, plus batch
//! orchestration over a labeled dataset.

use ndarray::Array2;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::analytic::{BasisFunction, HarmonicModel, HarmonicPart, ScalarField};
use crate::classifier::{argmax, ModelSpec};
use crate::coords::{AffineParams, CoordGrid, AFFINE_PARAM_COUNT};
use crate::dataset::LabeledDataset;
use crate::error::{HaamError, Result};
use crate::io::run::{RunEntry, RunRecord};
use crate::metrics::metric_report;
use crate::perturbation::{backprop_to_field, compose_adversarial, ImageTensor, PerturbationConfig};

pub const DEFAULT_MAX_ITERATIONS: usize = 100;
pub const DEFAULT_LR_HARMONIC: f64 = 1.5;
pub const DEFAULT_LR_AFFINE: f64 = 0.1;

/// Which analytic bases the attacked field combines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisSelection {
    Polynomial,
    Sine,
    Combined,
}

impl BasisSelection {
    pub fn as_str(&self) -> &'static str {
        match self {
            BasisSelection::Polynomial => "poly",
            BasisSelection::Sine => "sine",
            BasisSelection::Combined => "combined",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "poly" => Ok(BasisSelection::Polynomial),
            "sine" => Ok(BasisSelection::Sine),
            "combined" => Ok(BasisSelection::Combined),
            other => Err(HaamError::InvalidParameter(format!(
                "unknown basis {other:?}, expected poly, sine or combined"
            ))),
        }
    }

    /// The untuned starting model for this selection: unit `z^2` polynomial
    /// and unit combination weights.
    pub fn template(&self, part: HarmonicPart) -> HarmonicModel {
        let quadratic = BasisFunction::quadratic(1.0, 0.0, 0.0);
        match self {
            BasisSelection::Polynomial => HarmonicModel::single(quadratic, 1.0, part),
            BasisSelection::Sine => HarmonicModel::single(BasisFunction::Sine, 1.0, part),
            BasisSelection::Combined => HarmonicModel::new(
                vec![quadratic, BasisFunction::Sine],
                vec![1.0, 1.0],
                part,
            )
            .expect("combined template is valid"),
        }
    }
}

/// How the optimizer seeds `P_h` and `P_a` before the first iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitStrategy {
    /// Identity field and transform, plus `U(-0.05, 0.05)` noise on every
    /// parameter (scales multiplied by `1 + noise`).
    IdentityPlusNoise,
    /// Coefficients and weights from `U(-1, 1)`, scales from `U(0.5, 2)`,
    /// translations from `U(-0.5, 0.5)`.
    Random,
}

impl InitStrategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            InitStrategy::IdentityPlusNoise => "identity-plus-noise",
            InitStrategy::Random => "random",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "identity-plus-noise" => Ok(InitStrategy::IdentityPlusNoise),
            "random" => Ok(InitStrategy::Random),
            other => Err(HaamError::InvalidParameter(format!(
                "unknown init strategy {other:?}, expected identity-plus-noise or random"
            ))),
        }
    }
}

/// Hyperparameters of one [`haam_attack`] invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub max_iterations: usize,
    pub lr_harmonic: f64,
    pub lr_affine: f64,
    pub perturbation: PerturbationConfig,
    pub basis: BasisSelection,
    pub seed: u64,
    pub init: InitStrategy,
}

impl AttackConfig {
    pub fn new(perturbation: PerturbationConfig) -> Self {
        Self {
            max_iterations: DEFAULT_MAX_ITERATIONS,
            lr_harmonic: DEFAULT_LR_HARMONIC,
            lr_affine: DEFAULT_LR_AFFINE,
            perturbation,
            basis: BasisSelection::Combined,
            seed: 0,
            init: InitStrategy::IdentityPlusNoise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.perturbation.validate()?;
        for (name, value) in [
            ("lr_harmonic", self.lr_harmonic),
            ("lr_affine", self.lr_affine),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(HaamError::InvalidParameter(format!(
                    "{name} must be a positive real, got {value}"
                )));
            }
        }
        Ok(())
    }

    /// Advisory check of the learning-rate ratio discipline (`lr1 >= lr2`);
    /// violating it is legal but usually a mistake.
    pub fn lr_ratio_warning(&self) -> Option<String> {
        (self.lr_harmonic < self.lr_affine).then(|| {
            format!(
                "lr_harmonic ({}) is below lr_affine ({}); the harmonic rate is \
                 normally 10-20x the affine rate",
                self.lr_harmonic, self.lr_affine
            )
        })
    }
}

/// One optimized field: the harmonic model and the affine transform feeding
/// it. Color mode carries one per channel, gray mode a single shared one.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    pub harmonic: HarmonicModel,
    pub affine: AffineParams,
}

impl FieldParams {
    fn init(basis: BasisSelection, part: HarmonicPart, init: InitStrategy, rng: &mut ChaCha8Rng) -> Self {
        let mut harmonic = basis.template(part);
        let mut affine = AffineParams::identity();
        match init {
            InitStrategy::IdentityPlusNoise => {
                let noisy: Vec<f64> = harmonic
                    .params()
                    .iter()
                    .map(|p| p + rng.random_range(-0.05..0.05))
                    .collect();
                harmonic.set_params(&noisy).expect("template layout unchanged");
                affine.rotation_cos += rng.random_range(-0.05..0.05);
                affine.scale_x *= 1.0 + rng.random_range(-0.05..0.05);
                affine.scale_y *= 1.0 + rng.random_range(-0.05..0.05);
                affine.translate_x += rng.random_range(-0.05..0.05);
                affine.translate_y += rng.random_range(-0.05..0.05);
            }
            InitStrategy::Random => {
                let drawn: Vec<f64> = (0..harmonic.param_count())
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect();
                harmonic.set_params(&drawn).expect("template layout unchanged");
                affine.rotation_cos = rng.random_range(-1.0..1.0);
                affine.scale_x = rng.random_range(0.5..2.0);
                affine.scale_y = rng.random_range(0.5..2.0);
                affine.translate_x = rng.random_range(-0.5..0.5);
                affine.translate_y = rng.random_range(-0.5..0.5);
            }
        }
        Self {
            harmonic,
            affine: affine.project(),
        }
    }

    /// Render this field over the base grid: transform the grid, then sample
    /// the harmonic part at the transformed coordinates.
    pub fn render(&self, base_grid: &CoordGrid) -> Result<(CoordGrid, ScalarField)> {
        let transformed = self.affine.apply(base_grid);
        let field = self.harmonic.evaluate(&transformed)?;
        Ok((transformed, field))
    }
}

/// Outcome of one optimization run. `adversarial_image` is always the last
/// composed iterate, even when the attack failed.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub adversarial_image: ImageTensor,
    pub adv: bool,
    pub iterations_used: usize,
    /// `J` at every composed iterate the loop visited, initial included.
    pub loss_trace: Vec<f64>,
    pub final_params: Vec<FieldParams>,
    /// Set when a mid-run field overflow aborted the optimization; the
    /// result then holds the last renderable iterate and `adv` is false.
    pub fault: Option<String>,
}

fn predict_and_loss(model: &ModelSpec, image: &ImageTensor, label: usize) -> Result<(usize, f64)> {
    let logits = model.forward(image)?;
    let pred = argmax(logits.as_slice().expect("logits are contiguous"));
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = max + logits.mapv(|v| (v - max).exp()).sum().ln();
    Ok((pred, logits[label] - lse))
}

fn render_all(
    state: &[FieldParams],
    base_grid: &CoordGrid,
) -> Result<(Vec<CoordGrid>, Vec<ScalarField>)> {
    let mut grids = Vec::with_capacity(state.len());
    let mut fields = Vec::with_capacity(state.len());
    for params in state {
        let (grid, field) = params.render(base_grid)?;
        grids.push(grid);
        fields.push(field);
    }
    Ok((grids, fields))
}

/// `dJ/dp` for one field's parameter sets, harmonic entries aligned with
/// [`HarmonicModel::params`], affine entries with [`AffineParams::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGradients {
    pub harmonic: Vec<f64>,
    pub affine: [f64; AFFINE_PARAM_COUNT],
}

/// Chain one field's image-space gradient `dJ/dh` down to its parameters:
/// harmonic parameters through the per-parameter derivative fields, affine
/// parameters through the spatial gradient at the transformed grid times
/// the coordinate derivatives.
fn field_gradients(
    params: &FieldParams,
    grid: &CoordGrid,
    d_field: &Array2<f64>,
    base_grid: &CoordGrid,
) -> Result<FieldGradients> {
    let param_fields = params.harmonic.parameter_gradients(grid)?;
    let harmonic = param_fields
        .iter()
        .map(|field| (d_field * field.values()).sum())
        .collect();

    let (dh_dx, dh_dy) = params.harmonic.spatial_gradient(grid)?;
    let coord_grads = params.affine.gradients(base_grid);
    let mut affine = [0.0; AFFINE_PARAM_COUNT];
    for (ai, slot) in affine.iter_mut().enumerate() {
        let deriv = coord_grads.by_index(ai);
        *slot = (d_field * &(dh_dx.values() * &deriv.dx + dh_dy.values() * &deriv.dy)).sum();
    }
    Ok(FieldGradients { harmonic, affine })
}

/// Full analytic gradient `dJ/dp` of `J = log p(label | I_dis(state))` for
/// every parameter of every field, at the given state.
pub fn attack_gradients(
    image: &ImageTensor,
    label: usize,
    model: &ModelSpec,
    state: &[FieldParams],
    perturbation: &PerturbationConfig,
) -> Result<Vec<FieldGradients>> {
    let base_grid = CoordGrid::normalized(image.height(), image.width())?;
    let (grids, fields) = render_all(state, &base_grid)?;
    let i_dis = compose_adversarial(image, &fields, perturbation)?;
    let lag = model.loss_and_input_grad(&i_dis, label)?;
    let d_fields = backprop_to_field(image, &fields, perturbation, &lag.input_grad)?;
    state
        .iter()
        .zip(&grids)
        .zip(&d_fields)
        .map(|((params, grid), d_field)| field_gradients(params, grid, d_field, &base_grid))
        .collect()
}

/// One gradient step on every field's parameters. `d_fields` holds `dJ/dh`
/// per field; descending `J` drives the true class's likelihood down.
fn descend(
    state: &mut [FieldParams],
    grids: &[CoordGrid],
    d_fields: &[Array2<f64>],
    base_grid: &CoordGrid,
    config: &AttackConfig,
) -> Result<()> {
    for (fi, params) in state.iter_mut().enumerate() {
        let grads = field_gradients(params, &grids[fi], &d_fields[fi], base_grid)?;

        let mut values = params.harmonic.params();
        for (value, g) in values.iter_mut().zip(&grads.harmonic) {
            *value -= config.lr_harmonic * g;
        }
        params.harmonic.set_params(&values)?;

        let mut affine_values = params.affine.params();
        for (value, g) in affine_values.iter_mut().zip(&grads.affine) {
            *value -= config.lr_affine * g;
        }
        params.affine.set_params(&affine_values);
        params.affine = params.affine.project();
    }
    Ok(())
}

/// Run the optimization loop on one image.
///
/// The initial composition happens before the loop, so the returned image
/// differs from the input even when the loop body never runs. Each
/// iteration descends `P_h` at `lr_harmonic` and `P_a` at `lr_affine`
/// (projected back into range), recomposes, and re-checks the prediction;
/// the loop exits at `max_iterations` or on the first misclassification.
pub fn haam_attack(
    image: &ImageTensor,
    label: usize,
    model: &ModelSpec,
    config: &AttackConfig,
) -> Result<AttackResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    haam_attack_with_rng(image, label, model, config, &mut rng)
}

fn haam_attack_with_rng(
    image: &ImageTensor,
    label: usize,
    model: &ModelSpec,
    config: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AttackResult> {
    config.validate()?;
    let base_grid = CoordGrid::normalized(image.height(), image.width())?;
    let field_count = config.perturbation.field_count(image.channels());
    let mut state: Vec<FieldParams> = (0..field_count)
        .map(|_| FieldParams::init(config.basis, config.perturbation.part, config.init, rng))
        .collect();

    let (mut grids, mut fields) = match render_all(&state, &base_grid) {
        Ok(pair) => pair,
        Err(e @ HaamError::FieldOverflow) => {
            return Ok(AttackResult {
                adversarial_image: image.clone(),
                adv: false,
                iterations_used: 0,
                loss_trace: vec![],
                final_params: state,
                fault: Some(e.to_string()),
            });
        }
        Err(e) => return Err(e),
    };
    let mut i_dis = compose_adversarial(image, &fields, &config.perturbation)?;
    let (mut pred, mut loss) = predict_and_loss(model, &i_dis, label)?;
    let mut loss_trace = vec![loss];
    let mut iterations_used = 0;
    let mut fault = None;

    while iterations_used < config.max_iterations && pred == label {
        let lag = model.loss_and_input_grad(&i_dis, label)?;
        let d_fields = backprop_to_field(image, &fields, &config.perturbation, &lag.input_grad)?;

        let mut next = state.clone();
        descend(&mut next, &grids, &d_fields, &base_grid, config)?;
        iterations_used += 1;

        match render_all(&next, &base_grid) {
            Ok((g, f)) => {
                state = next;
                grids = g;
                fields = f;
            }
            Err(e @ HaamError::FieldOverflow) => {
                fault = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        }
        i_dis = compose_adversarial(image, &fields, &config.perturbation)?;
        let checked = predict_and_loss(model, &i_dis, label)?;
        pred = checked.0;
        loss = checked.1;
        loss_trace.push(loss);
    }

    let adv = fault.is_none() && pred != label;
    let _ = loss;
    Ok(AttackResult {
        adversarial_image: i_dis,
        adv,
        iterations_used,
        loss_trace,
        final_params: state,
        fault,
    })
}

/// Aggregate figures for one [`batch_attack`] run. Rates and means are
/// absent (not zero) when their denominator is empty: `success_rate` and
/// `mean_iterations` cover attacked (non-skipped) images, the metric means
/// cover successful adversaries only.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSummary {
    pub total: usize,
    pub skipped: usize,
    pub attacked: usize,
    pub successes: usize,
    pub success_rate: Option<f64>,
    pub mean_iterations: Option<f64>,
    pub mean_pnr: Option<f64>,
    pub mean_ssim: Option<f64>,
    pub mean_essim: Option<f64>,
}

/// Per-image outcomes plus the summary. `entries` (dataset order, one per
/// image) are manifest-ready; `results` aligns with them and is `None` for
/// skipped images.
#[derive(Debug, Clone)]
pub struct BatchReport {
    pub entries: Vec<RunEntry>,
    pub results: Vec<Option<AttackResult>>,
    pub summary: BatchSummary,
}

fn final_loss(result: &AttackResult) -> f64 {
    result.loss_trace.last().copied().unwrap_or(f64::INFINITY)
}

fn attack_one(
    index: usize,
    dataset: &LabeledDataset,
    model: &ModelSpec,
    config: &AttackConfig,
    restarts: usize,
) -> Result<(RunEntry, Option<AttackResult>)> {
    let image = dataset.image(index);
    let label = dataset.label(index);
    let predicted_before = model.predict(&image)?;

    if predicted_before != label {
        return Ok((
            RunEntry {
                record: RunRecord {
                    image_id: index,
                    label,
                    predicted_before,
                    predicted_after: predicted_before,
                    adv: false,
                    skipped: true,
                    iterations: 0,
                    epsilon: config.perturbation.epsilon,
                    pnr: None,
                    ssim: None,
                    essim: None,
                },
                adversarial_image: None,
            },
            None,
        ));
    }

    let mut best: Option<AttackResult> = None;
    for restart in 0..restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(((index as u64) << 20) | restart as u64);
        let result = haam_attack_with_rng(&image, label, model, config, &mut rng)?;
        let better = match &best {
            None => true,
            Some(b) => final_loss(&result) < final_loss(b),
        };
        if better {
            best = Some(result);
        }
    }
    let result = best.expect("at least one restart ran");

    // The exported artifact is quantized, so the manifest records what the
    // saved bytes do, not what the float iterate did.
    let quantized = ImageTensor::from_u8(&result.adversarial_image.quantized())?;
    let predicted_after = model.predict(&quantized)?;
    let report = metric_report(&image, &quantized)?;
    let entry = RunEntry {
        record: RunRecord {
            image_id: index,
            label,
            predicted_before,
            predicted_after,
            adv: predicted_after != label,
            skipped: false,
            iterations: result.iterations_used,
            epsilon: config.perturbation.epsilon,
            pnr: Some(report.pnr),
            ssim: Some(report.ssim),
            essim: Some(report.essim),
        },
        adversarial_image: Some(quantized),
    };
    Ok((entry, Some(result)))
}

/// Attack every image in the dataset. Images the model already misclassifies
/// are skipped and excluded from the success-rate denominator. With
/// `restarts > 1` each image keeps the restart with the lowest final loss.
/// Per-image work may run on multiple workers; outputs are merged in dataset
/// order.
pub fn batch_attack(
    dataset: &LabeledDataset,
    model: &ModelSpec,
    config: &AttackConfig,
    restarts: usize,
) -> Result<BatchReport> {
    config.validate()?;
    let outcomes: Vec<(RunEntry, Option<AttackResult>)> = (0..dataset.len())
        .into_par_iter()
        .map(|index| attack_one(index, dataset, model, config, restarts))
        .collect::<Result<_>>()?;

    let mut entries = Vec::with_capacity(outcomes.len());
    let mut results = Vec::with_capacity(outcomes.len());
    for (entry, result) in outcomes {
        entries.push(entry);
        results.push(result);
    }
    let summary = summarize(&entries);
    Ok(BatchReport {
        entries,
        results,
        summary,
    })
}

/// Recompute the batch summary from manifest entries alone; [`batch_attack`]
/// uses this same path, so persisted runs summarize identically.
pub fn summarize(entries: &[RunEntry]) -> BatchSummary {
    let total = entries.len();
    let skipped = entries.iter().filter(|e| e.record.skipped).count();
    let attacked = total - skipped;
    let successes = entries.iter().filter(|e| e.record.adv).count();
    let mean = |values: Vec<f64>| {
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    };
    let success_metric = |pick: fn(&RunRecord) -> Option<f64>| {
        mean(
            entries
                .iter()
                .filter(|e| e.record.adv)
                .filter_map(|e| pick(&e.record))
                .collect(),
        )
    };
    BatchSummary {
        total,
        skipped,
        attacked,
        successes,
        success_rate: (attacked > 0).then(|| successes as f64 / attacked as f64),
        mean_iterations: mean(
            entries
                .iter()
                .filter(|e| !e.record.skipped)
                .map(|e| e.record.iterations as f64)
                .collect(),
        ),
        mean_pnr: success_metric(|r| r.pnr),
        mean_ssim: success_metric(|r| r.ssim),
        mean_essim: success_metric(|r| r.essim),
    }
}
