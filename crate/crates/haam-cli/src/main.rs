//! Command-line front end for the HAAM toolkit: dataset synthesis, classifier
//! training, harmonic and FGSM attacks, transferability evaluation, and field
//! rendering.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use haam::analytic::HarmonicPart;
use haam::attack::{batch_attack, summarize, AttackConfig, BasisSelection, BatchSummary};
use haam::classifier::{accuracy, train, Architecture, ModelSpec, TrainConfig};
use haam::coords::{AffineParams, CoordGrid, AFFINE_PARAM_COUNT};
use haam::dataset::{synthetic_glyphs, LabeledDataset, Split};
use haam::io::checkpoint::{read_model, write_model};
use haam::io::idx::{read_idx, write_idx};
use haam::io::netpbm::write_image;
use haam::io::run::{load_run, save_run, RunEntry, RunRecord};
use haam::metrics::{
    bucket_csv, bucket_report, metric_report, transfer_rate, BucketCase, BucketScheme,
    TransferCase,
};
use haam::perturbation::{normalize_field, ImageTensor, PerturbMode, PerturbationConfig};

#[derive(Parser)]
#[command(
    name = "haam",
    version,
    about = "Harmonic adversarial attack toolkit",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic glyph dataset as IDX files with MNIST-layout
    /// names (train-images-idx3-ubyte and friends).
    SynthData {
        /// Training images to generate.
        #[arg(long, default_value_t = 50_000)]
        train: usize,
        /// Test images to generate.
        #[arg(long, default_value_t = 10_000)]
        test: usize,
        #[arg(long, default_value_t = 4242)]
        seed: u64,
        /// Output directory for the four IDX files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a classifier and write its checkpoint.
    Train {
        #[arg(long, value_parser = parse_arch)]
        arch: Architecture,
        /// Dataset directory holding MNIST-layout IDX files.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the harmonic attack over the test split and persist the run.
    Attack {
        /// Source model checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory holding MNIST-layout IDX files.
        #[arg(long)]
        data: PathBuf,
        /// Perturbation budget in intensity units, > 0.
        #[arg(long, value_parser = parse_epsilon)]
        epsilon: f64,
        /// gray shares one field across channels, color learns one per
        /// channel.
        #[arg(long, default_value = "gray", value_parser = parse_mode)]
        mode: PerturbMode,
        /// Harmonic part of the analytic bases: real or imag.
        #[arg(long, default_value = "real", value_parser = parse_part)]
        part: HarmonicPart,
        /// Analytic bases to combine: poly, sine or combined.
        #[arg(long, default_value = "combined", value_parser = parse_basis)]
        basis: BasisSelection,
        /// Iteration budget T.
        #[arg(long, default_value_t = 100)]
        iters: usize,
        #[arg(long, default_value_t = 1.5)]
        lr_harmonic: f64,
        #[arg(long, default_value_t = 0.1)]
        lr_affine: f64,
        /// Random restarts per image; the lowest-loss result is kept.
        #[arg(long, default_value_t = 1)]
        restarts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for the manifest and adversarial images.
        #[arg(long)]
        out_dir: PathBuf,
        /// Worker threads for per-image attacks; defaults to the available
        /// parallelism.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run the one-step FGSM baseline; same manifest format as attack.
    BaselineFgsm {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_epsilon)]
        epsilon: f64,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Evaluate a persisted attack run against another model and write the
    /// bucketed transfer table.
    Transfer {
        /// Directory written by a previous attack or baseline-fgsm run.
        #[arg(long)]
        run_dir: PathBuf,
        /// Target model checkpoint.
        #[arg(long)]
        target_model: PathBuf,
        /// Bucketing scheme: pnr10, ssim3 or essim3.
        #[arg(long, value_parser = parse_bucket)]
        bucket: BucketScheme,
        /// CSV output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a normalized harmonic field as a PGM image.
    Render {
        #[arg(long, value_parser = parse_basis)]
        basis: BasisSelection,
        /// Comma-separated harmonic parameters (per basis: coefficients,
        /// then weight); defaults to the basis template.
        #[arg(long)]
        params: Option<String>,
        /// Comma-separated affine parameters rot,sx,sy,tx,ty; defaults to
        /// the identity.
        #[arg(long)]
        affine: Option<String>,
        /// Square output size in pixels.
        #[arg(long, default_value_t = 28)]
        size: usize,
        #[arg(long, default_value = "real", value_parser = parse_part)]
        part: HarmonicPart,
        /// PGM output path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_arch(text: &str) -> Result<Architecture, haam::HaamError> {
    Architecture::parse(text)
}

fn parse_basis(text: &str) -> Result<BasisSelection, haam::HaamError> {
    BasisSelection::parse(text)
}

fn parse_bucket(text: &str) -> Result<BucketScheme, haam::HaamError> {
    BucketScheme::parse(text)
}

fn parse_mode(text: &str) -> Result<PerturbMode, String> {
    match text {
        "gray" => Ok(PerturbMode::Gray),
        "color" => Ok(PerturbMode::Color),
        other => Err(format!("unknown mode {other:?}, expected gray or color")),
    }
}

fn parse_part(text: &str) -> Result<HarmonicPart, String> {
    match text {
        "real" => Ok(HarmonicPart::Real),
        "imag" => Ok(HarmonicPart::Imaginary),
        other => Err(format!("unknown part {other:?}, expected real or imag")),
    }
}

fn parse_epsilon(text: &str) -> Result<f64, String> {
    let value: f64 = text.parse().map_err(|e| format!("{e}"))?;
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(format!("epsilon must be a positive real, got {value}"))
    }
}

fn split_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    match split {
        Split::Train => (
            dir.join("train-images-idx3-ubyte"),
            dir.join("train-labels-idx1-ubyte"),
        ),
        Split::Test => (
            dir.join("t10k-images-idx3-ubyte"),
            dir.join("t10k-labels-idx1-ubyte"),
        ),
    }
}

fn load_split(dir: &Path, split: Split) -> Result<LabeledDataset> {
    let (images, labels) = split_paths(dir, split);
    read_idx(&images, &labels, split)
        .with_context(|| format!("loading {} split from {}", split.as_str(), dir.display()))
}

fn with_pool<T: Send>(workers: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        Some(n) => {
            if n == 0 {
                bail!("--workers must be at least 1");
            }
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .context("building worker pool")?;
            Ok(pool.install(job))
        }
        None => Ok(job()),
    }
}

fn print_summary(summary: &BatchSummary) {
    println!(
        "images {} attacked {} skipped {}",
        summary.total, summary.attacked, summary.skipped
    );
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "n/a".into());
    println!(
        "success rate {} ({}/{})",
        cell(summary.success_rate),
        summary.successes,
        summary.attacked
    );
    println!("mean iterations {}", cell(summary.mean_iterations));
    println!(
        "mean pnr {} mean ssim {} mean essim {}",
        cell(summary.mean_pnr),
        cell(summary.mean_ssim),
        cell(summary.mean_essim)
    );
}

fn cmd_synth_data(train_count: usize, test_count: usize, seed: u64, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    for (split, count) in [(Split::Train, train_count), (Split::Test, test_count)] {
        let dataset = synthetic_glyphs(count, seed, split);
        let (images, labels) = split_paths(out, split);
        write_idx(&images, &labels, &dataset)?;
        println!("wrote {} {} images to {}", count, split.as_str(), out.display());
    }
    Ok(())
}

fn cmd_train(
    arch: Architecture,
    data: &Path,
    epochs: usize,
    lr: f64,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let train_set = load_split(data, Split::Train)?;
    let test_set = load_split(data, Split::Test)?;
    let config = TrainConfig {
        epochs,
        learning_rate: lr,
        seed,
        ..TrainConfig::default()
    };
    let (model, report) = train(arch, &train_set, &config)?;
    let held_out = accuracy(&model, &test_set)?;
    write_model(out, &model)?;
    println!(
        "{} trained for {} epochs, final epoch loss {:.6}",
        arch.as_str(),
        report.epoch_losses.len(),
        report.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    println!("held-out accuracy {held_out:.6}");
    println!("checkpoint written to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_attack(
    model_path: &Path,
    data: &Path,
    config: AttackConfig,
    restarts: usize,
    out_dir: &Path,
    workers: Option<usize>,
) -> Result<()> {
    let model = read_model(model_path)?;
    let dataset = load_split(data, Split::Test)?;
    if let Some(warning) = config.lr_ratio_warning() {
        eprintln!("warning: {warning}");
    }
    let report = with_pool(workers, || batch_attack(&dataset, &model, &config, restarts))??;
    save_run(out_dir, &report.entries)?;
    print_summary(&report.summary);
    println!("run written to {}", out_dir.display());
    Ok(())
}

fn fgsm_one(
    dataset: &LabeledDataset,
    model: &ModelSpec,
    epsilon: f64,
    index: usize,
) -> Result<RunEntry, haam::HaamError> {
    let image = dataset.image(index);
    let label = dataset.label(index);
    let predicted_before = model.predict(&image)?;
    if predicted_before != label {
        return Ok(RunEntry {
            record: RunRecord {
                image_id: index,
                label,
                predicted_before,
                predicted_after: predicted_before,
                adv: false,
                skipped: true,
                iterations: 0,
                epsilon,
                pnr: None,
                ssim: None,
                essim: None,
            },
            adversarial_image: None,
        });
    }
    let adversarial = model.fgsm_attack(&image, label, epsilon)?;
    let quantized = ImageTensor::from_u8(&adversarial.quantized())?;
    let predicted_after = model.predict(&quantized)?;
    let report = metric_report(&image, &quantized)?;
    Ok(RunEntry {
        record: RunRecord {
            image_id: index,
            label,
            predicted_before,
            predicted_after,
            adv: predicted_after != label,
            skipped: false,
            iterations: 1,
            epsilon,
            pnr: Some(report.pnr),
            ssim: Some(report.ssim),
            essim: Some(report.essim),
        },
        adversarial_image: Some(quantized),
    })
}

fn cmd_baseline_fgsm(
    model_path: &Path,
    data: &Path,
    epsilon: f64,
    out_dir: &Path,
    workers: Option<usize>,
) -> Result<()> {
    use rayon::prelude::*;
    let model = read_model(model_path)?;
    let dataset = load_split(data, Split::Test)?;
    let entries: Vec<RunEntry> = with_pool(workers, || {
        (0..dataset.len())
            .into_par_iter()
            .map(|index| fgsm_one(&dataset, &model, epsilon, index))
            .collect::<Result<_, _>>()
    })??;
    save_run(out_dir, &entries)?;
    print_summary(&summarize(&entries));
    println!("run written to {}", out_dir.display());
    Ok(())
}

fn scheme_metric(scheme: BucketScheme, record: &RunRecord) -> Option<f64> {
    match scheme {
        BucketScheme::Pnr10 => record.pnr,
        BucketScheme::Ssim3 => record.ssim,
        BucketScheme::Essim3 => record.essim,
    }
}

fn cmd_transfer(
    run_dir: &Path,
    target_model: &Path,
    scheme: BucketScheme,
    out: &Path,
) -> Result<()> {
    let entries = load_run(run_dir)?;
    let target = read_model(target_model)?;

    let mut transfer_cases = Vec::new();
    let mut bucket_cases = Vec::new();
    for entry in &entries {
        if !entry.record.adv {
            continue;
        }
        let image = entry
            .adversarial_image
            .clone()
            .expect("successful entries carry their image");
        transfer_cases.push(TransferCase {
            adversarial_image: image.clone(),
            label: entry.record.label,
            adv: true,
        });
        let metric_value = scheme_metric(scheme, &entry.record)
            .expect("successful entries carry their metrics");
        bucket_cases.push(BucketCase {
            metric_value,
            adversarial_image: image,
            label: entry.record.label,
        });
    }

    let report = transfer_rate(&transfer_cases, &target)?;
    let rows = bucket_report(&bucket_cases, scheme, Some(&target))?;
    std::fs::write(out, bucket_csv(scheme, &rows))?;

    match report.rate {
        Some(rate) => println!(
            "transfer rate {:.6} ({}/{})",
            rate, report.transferred_count, report.source_count
        ),
        None => println!("transfer rate n/a (no successful source adversaries)"),
    }
    println!("bucket table written to {}", out.display());
    Ok(())
}

fn parse_floats(text: &str, what: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|token| {
            token
                .trim()
                .parse::<f64>()
                .with_context(|| format!("bad {what} value {token:?}"))
        })
        .collect()
}

fn cmd_render(
    basis: BasisSelection,
    params: Option<&str>,
    affine: Option<&str>,
    size: usize,
    part: HarmonicPart,
    out: &Path,
) -> Result<()> {
    let mut model = basis.template(part);
    if let Some(text) = params {
        let values = parse_floats(text, "--params")?;
        model.set_params(&values)?;
    }
    let transform = match affine {
        Some(text) => {
            let values = parse_floats(text, "--affine")?;
            if values.len() != AFFINE_PARAM_COUNT {
                bail!(
                    "--affine expects {AFFINE_PARAM_COUNT} values rot,sx,sy,tx,ty, got {}",
                    values.len()
                );
            }
            let mut t = AffineParams::identity();
            t.set_params(&[values[0], values[1], values[2], values[3], values[4]]);
            if !t.is_feasible() {
                bail!("--affine values out of range: rotation and translations in [-1,1], scales in [0.001,10]");
            }
            t
        }
        None => AffineParams::identity(),
    };

    let grid = CoordGrid::normalized(size, size)?;
    let field = model.evaluate(&transform.apply(&grid))?;
    let normalized = normalize_field(&field);
    let pixels = normalized.values().mapv(|v| (v + 1.0) * 127.5);
    let image = ImageTensor::from_gray(pixels)?;
    write_image(out, &image)?;
    println!("field written to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData {
            train,
            test,
            seed,
            out,
        } => cmd_synth_data(train, test, seed, &out),
        Command::Train {
            arch,
            data,
            epochs,
            lr,
            seed,
            out,
        } => cmd_train(arch, &data, epochs, lr, seed, &out),
        Command::Attack {
            model,
            data,
            epsilon,
            mode,
            part,
            basis,
            iters,
            lr_harmonic,
            lr_affine,
            restarts,
            seed,
            out_dir,
            workers,
        } => {
            let perturbation = PerturbationConfig::new(epsilon, mode, part)?;
            let config = AttackConfig {
                max_iterations: iters,
                lr_harmonic,
                lr_affine,
                perturbation,
                basis,
                seed,
                init: haam::attack::InitStrategy::IdentityPlusNoise,
            };
            cmd_attack(&model, &data, config, restarts, &out_dir, workers)
        }
        Command::BaselineFgsm {
            model,
            data,
            epsilon,
            out_dir,
            workers,
        } => cmd_baseline_fgsm(&model, &data, epsilon, &out_dir, workers),
        Command::Transfer {
            run_dir,
            target_model,
            bucket,
            out,
        } => cmd_transfer(&run_dir, &target_model, bucket, &out),
        Command::Render {
            basis,
            params,
            affine,
            size,
            part,
            out,
        } => cmd_render(basis, params.as_deref(), affine.as_deref(), size, part, &out),
    }
}

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::from(1)
        }
    }
}
