//! Attack-run persistence: a line-delimited JSON manifest plus one exported
//! adversarial image per attacked input, named by image id.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::netpbm::{read_image, write_image};
use crate::error::{HaamError, Result};
use crate::perturbation::ImageTensor;

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// One manifest line. Metric fields are null for skipped images (no attack
/// ran).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub image_id: usize,
    pub label: usize,
    pub predicted_before: usize,
    pub predicted_after: usize,
    pub adv: bool,
    pub skipped: bool,
    pub iterations: usize,
    pub epsilon: f64,
    pub pnr: Option<f64>,
    pub ssim: Option<f64>,
    pub essim: Option<f64>,
}

/// A manifest record together with its exported image (absent for skipped
/// entries).
#[derive(Debug, Clone, PartialEq)]
pub struct RunEntry {
    pub record: RunRecord,
    pub adversarial_image: Option<ImageTensor>,
}

fn image_path(dir: &Path, image_id: usize, channels: usize) -> PathBuf {
    let ext = if channels == 3 { "ppm" } else { "pgm" };
    dir.join(format!("{image_id:05}.{ext}"))
}

/// Write the manifest and the adversarial images into `dir` (created if
/// missing). Entries are written in the order given.
pub fn save_run(dir: &Path, entries: &[RunEntry]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = BufWriter::new(File::create(dir.join(MANIFEST_NAME))?);
    for entry in entries {
        if !entry.record.skipped {
            let image = entry.adversarial_image.as_ref().ok_or_else(|| {
                HaamError::ManifestParse(format!(
                    "entry {} is not skipped but carries no image",
                    entry.record.image_id
                ))
            })?;
            write_image(&image_path(dir, entry.record.image_id, image.channels()), image)?;
        }
        serde_json::to_writer(&mut manifest, &entry.record)
            .map_err(|e| HaamError::ManifestParse(e.to_string()))?;
        manifest.write_all(b"\n")?;
    }
    manifest.flush()?;
    Ok(())
}

/// Load a run directory back. Every non-skipped record must have its image
/// on disk; a missing file is an integrity error naming the id.
pub fn load_run(dir: &Path) -> Result<Vec<RunEntry>> {
    let manifest = BufReader::new(File::open(dir.join(MANIFEST_NAME))?);
    let mut entries = Vec::new();
    for (line_no, line) in manifest.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RunRecord = serde_json::from_str(&line).map_err(|e| {
            HaamError::ManifestParse(format!("line {}: {e}", line_no + 1))
        })?;
        let adversarial_image = if record.skipped {
            None
        } else {
            let gray = image_path(dir, record.image_id, 1);
            let color = image_path(dir, record.image_id, 3);
            let path = if gray.exists() {
                gray
            } else if color.exists() {
                color
            } else {
                return Err(HaamError::MissingImage {
                    id: record.image_id.to_string(),
                });
            };
            Some(read_image(&path)?)
        };
        entries.push(RunEntry {
            record,
            adversarial_image,
        });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn entry(image_id: usize, skipped: bool) -> RunEntry {
        let image = ImageTensor::from_gray(Array2::from_shape_fn((4, 4), |(i, j)| {
            ((image_id * 31 + i * 4 + j) % 256) as f64
        }))
        .unwrap();
        RunEntry {
            record: RunRecord {
                image_id,
                label: image_id % 10,
                predicted_before: image_id % 10,
                predicted_after: (image_id + 1) % 10,
                adv: !skipped,
                skipped,
                iterations: if skipped { 0 } else { 17 },
                epsilon: 8.0,
                pnr: (!skipped).then_some(0.05),
                ssim: (!skipped).then_some(0.97),
                essim: (!skipped).then_some(0.93),
            },
            adversarial_image: (!skipped).then_some(image),
        }
    }

    #[test]
    fn save_then_load_returns_identical_entries() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![entry(0, false), entry(1, true), entry(2, false)];
        save_run(dir.path(), &entries).unwrap();
        let loaded = load_run(dir.path()).unwrap();
        assert_eq!(loaded, entries);

        // Saving the loaded entries again is byte-identical.
        let other = tempfile::tempdir().unwrap();
        save_run(other.path(), &loaded).unwrap();
        assert_eq!(
            std::fs::read(dir.path().join(MANIFEST_NAME)).unwrap(),
            std::fs::read(other.path().join(MANIFEST_NAME)).unwrap()
        );
        assert_eq!(
            std::fs::read(dir.path().join("00002.pgm")).unwrap(),
            std::fs::read(other.path().join("00002.pgm")).unwrap()
        );
    }

    #[test]
    fn missing_image_is_an_integrity_error_naming_the_id() {
        let dir = tempfile::tempdir().unwrap();
        save_run(dir.path(), &[entry(0, false), entry(5, false)]).unwrap();
        std::fs::remove_file(dir.path().join("00005.pgm")).unwrap();
        assert!(matches!(
            load_run(dir.path()),
            Err(HaamError::MissingImage { id }) if id == "5"
        ));
    }

    #[test]
    fn empty_run_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        save_run(dir.path(), &[]).unwrap();
        assert_eq!(load_run(dir.path()).unwrap(), vec![]);
    }

    #[test]
    fn manifest_field_names_are_fixed() {
        let dir = tempfile::tempdir().unwrap();
        save_run(dir.path(), &[entry(3, false)]).unwrap();
        let text = std::fs::read_to_string(dir.path().join(MANIFEST_NAME)).unwrap();
        for field in [
            "image_id",
            "label",
            "predicted_before",
            "predicted_after",
            "adv",
            "skipped",
            "iterations",
            "epsilon",
            "pnr",
            "ssim",
            "essim",
        ] {
            assert!(text.contains(&format!("\"{field}\"")), "missing {field}");
        }
    }
}
