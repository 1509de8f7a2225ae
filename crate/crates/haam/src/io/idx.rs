//! IDX dataset files (the MNIST container format): big-endian, magic-tagged
//! image and label archives.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array4;

use crate::dataset::{LabeledDataset, Split};
use crate::error::{HaamError, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_exact_or_truncated(
    reader: &mut impl Read,
    buf: &mut [u8],
    path: &Path,
    expected: usize,
    already: usize,
) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..])? {
            0 => {
                return Err(HaamError::IdxTruncated {
                    path: path.display().to_string(),
                    expected,
                    found: already + filled,
                })
            }
            n => filled += n,
        }
    }
    Ok(())
}

/// Read an image/label file pair into a dataset. The class count is the
/// highest label plus one.
pub fn read_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<LabeledDataset> {
    let mut images = BufReader::new(File::open(images_path)?);
    let magic = images.read_u32::<BigEndian>().map_err(|_| HaamError::IdxTruncated {
        path: images_path.display().to_string(),
        expected: 4,
        found: 0,
    })?;
    if magic != IMAGE_MAGIC {
        return Err(HaamError::IdxMagic {
            path: images_path.display().to_string(),
            expected: IMAGE_MAGIC,
            found: magic,
        });
    }
    let count = images.read_u32::<BigEndian>()? as usize;
    let rows = images.read_u32::<BigEndian>()? as usize;
    let cols = images.read_u32::<BigEndian>()? as usize;
    let payload = count * rows * cols;
    let mut pixel_bytes = vec![0u8; payload];
    read_exact_or_truncated(&mut images, &mut pixel_bytes, images_path, 16 + payload, 16)?;

    let mut labels = BufReader::new(File::open(labels_path)?);
    let magic = labels.read_u32::<BigEndian>().map_err(|_| HaamError::IdxTruncated {
        path: labels_path.display().to_string(),
        expected: 4,
        found: 0,
    })?;
    if magic != LABEL_MAGIC {
        return Err(HaamError::IdxMagic {
            path: labels_path.display().to_string(),
            expected: LABEL_MAGIC,
            found: magic,
        });
    }
    let label_count = labels.read_u32::<BigEndian>()? as usize;
    if label_count != count {
        return Err(HaamError::IdxCountMismatch {
            images: count,
            labels: label_count,
        });
    }
    let mut label_bytes = vec![0u8; label_count];
    read_exact_or_truncated(&mut labels, &mut label_bytes, labels_path, 8 + label_count, 8)?;

    let pixels = Array4::from_shape_vec((count, rows, cols, 1), pixel_bytes)
        .expect("length checked above");
    let num_classes = label_bytes.iter().copied().max().map_or(1, |m| m as usize + 1);
    LabeledDataset::new(pixels, label_bytes, num_classes, split)
}

/// Write a dataset as an IDX image/label file pair. Only single-channel
/// datasets fit the 3-D image layout.
pub fn write_idx(images_path: &Path, labels_path: &Path, dataset: &LabeledDataset) -> Result<()> {
    let (h, w, c) = dataset.image_shape();
    if c != 1 {
        return Err(HaamError::InvalidDimension(format!(
            "IDX image files hold single-channel data, got {c} channels"
        )));
    }
    let mut images = BufWriter::new(File::create(images_path)?);
    images.write_u32::<BigEndian>(IMAGE_MAGIC)?;
    images.write_u32::<BigEndian>(dataset.len() as u32)?;
    images.write_u32::<BigEndian>(h as u32)?;
    images.write_u32::<BigEndian>(w as u32)?;
    let raw = dataset.raw_images();
    let slice = raw.as_slice().expect("dataset storage is contiguous");
    images.write_all(slice)?;
    images.flush()?;

    let mut labels = BufWriter::new(File::create(labels_path)?);
    labels.write_u32::<BigEndian>(LABEL_MAGIC)?;
    labels.write_u32::<BigEndian>(dataset.len() as u32)?;
    labels.write_all(dataset.labels())?;
    labels.flush()?;
    Ok(())
}
