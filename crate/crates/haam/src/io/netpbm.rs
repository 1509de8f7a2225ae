//! Binary netpbm images: PGM (P5) for single-channel, PPM (P6) for
//! three-channel, maxval 255.
//!
//! Writing quantizes real intensities by round-half-away-from-zero; reading
//! returns exactly the stored bytes as reals, so write-read-write is
//! byte-identical after the first quantization.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array3;

use crate::error::{HaamError, Result};
use crate::perturbation::ImageTensor;

/// Write as PGM (1 channel) or PPM (3 channels).
pub fn write_image(path: &Path, image: &ImageTensor) -> Result<()> {
    let (h, w, c) = image.shape();
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => unreachable!("images carry 1 or 3 channels"),
    };
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "{magic}\n{w} {h}\n255\n")?;
    let bytes = image.quantized();
    out.write_all(bytes.as_slice().expect("quantized pixels are contiguous"))?;
    out.flush()?;
    Ok(())
}

/// Read a binary PGM or PPM file written at maxval 255.
pub fn read_image(path: &Path) -> Result<ImageTensor> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let parse_err =
        |msg: &str| HaamError::NetpbmParse(format!("{}: {msg}", path.display()));

    let mut pos = 0usize;
    // Header tokens are whitespace-separated; '#' starts a comment to
    // end-of-line.
    let next_token = |bytes: &[u8], pos: &mut usize| -> Option<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos > start {
            Some(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
        } else {
            None
        }
    };

    let magic = next_token(&bytes, &mut pos).ok_or_else(|| parse_err("empty file"))?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(parse_err(&format!("unsupported magic '{other}'"))),
    };
    let width: usize = next_token(&bytes, &mut pos)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| parse_err("missing or invalid width"))?;
    let height: usize = next_token(&bytes, &mut pos)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| parse_err("missing or invalid height"))?;
    let maxval: usize = next_token(&bytes, &mut pos)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| parse_err("missing or invalid maxval"))?;
    if maxval != 255 {
        return Err(parse_err(&format!("maxval {maxval} unsupported, need 255")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(parse_err("missing separator before pixel data"));
    }
    pos += 1;

    let expected = width * height * channels;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(parse_err(&format!(
            "payload holds {} bytes, expected {expected}",
            payload.len()
        )));
    }
    let pixels = Array3::from_shape_fn((height, width, channels), |(i, j, ch)| {
        f64::from(payload[(i * width + j) * channels + ch])
    });
    ImageTensor::new(pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn binary_pgm_round_trips_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let image = ImageTensor::from_gray(array![[0.0, 255.0], [128.0, 7.0]]).unwrap();
        write_image(&path, &image).unwrap();
        let first = std::fs::read(&path).unwrap();
        let loaded = read_image(&path).unwrap();
        assert_eq!(&loaded, &image);
        write_image(&path, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn writing_rounds_half_away_from_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let image = ImageTensor::from_gray(array![[127.5, 126.4999], [0.5, 254.5]]).unwrap();
        write_image(&path, &image).unwrap();
        let loaded = read_image(&path).unwrap();
        assert_eq!(loaded.pixels()[[0, 0, 0]], 128.0);
        assert_eq!(loaded.pixels()[[0, 1, 0]], 126.0);
        assert_eq!(loaded.pixels()[[1, 0, 0]], 1.0);
        assert_eq!(loaded.pixels()[[1, 1, 0]], 255.0);
    }

    #[test]
    fn color_images_use_ppm() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let image = ImageTensor::new(ndarray::Array3::from_shape_fn(
            (3, 4, 3),
            |(i, j, c)| ((i * 40 + j * 9 + c * 3) % 256) as f64,
        ))
        .unwrap();
        write_image(&path, &image).unwrap();
        let header = std::fs::read(&path).unwrap();
        assert!(header.starts_with(b"P6\n4 3\n255\n"));
        assert_eq!(&read_image(&path).unwrap(), &image);
    }

    #[test]
    fn parser_accepts_comments_and_rejects_malformed_input() {
        let dir = tempfile::tempdir().unwrap();
        let commented = dir.path().join("c.pgm");
        std::fs::write(&commented, b"P5\n# a comment\n2 2\n255\n\x10\x20\x30\x40").unwrap();
        let img = read_image(&commented).unwrap();
        assert_eq!(img.pixels()[[0, 1, 0]], 32.0);
        assert_eq!(img.pixels()[[1, 1, 0]], 64.0);

        let wrong_magic = dir.path().join("bad.pgm");
        std::fs::write(&wrong_magic, b"P4\n2 2\n255\n\x00\x00\x00\x00").unwrap();
        assert!(matches!(
            read_image(&wrong_magic),
            Err(HaamError::NetpbmParse(_))
        ));

        let wide_maxval = dir.path().join("wide.ppm");
        std::fs::write(&wide_maxval, b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(
            read_image(&wide_maxval),
            Err(HaamError::NetpbmParse(_))
        ));

        let short = dir.path().join("short.pgm");
        std::fs::write(&short, b"P5\n4 4\n255\n\x01\x02").unwrap();
        assert!(matches!(read_image(&short), Err(HaamError::NetpbmParse(_))));
    }
}
