//! Model checkpoints: a versioned binary container holding the architecture
//! tag, shapes, and little-endian 64-bit float parameter arrays behind the
//! magic string `HAAMMDL1`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::ArrayD;

use crate::classifier::{Architecture, ModelSpec};
use crate::error::{HaamError, Result};

const MAGIC: &[u8; 8] = b"HAAMMDL1";

fn arch_tag(architecture: Architecture) -> u8 {
    match architecture {
        Architecture::MlpSmall => 0,
        Architecture::CnnSmall => 1,
    }
}

fn arch_from_tag(tag: u8) -> Result<Architecture> {
    match tag {
        0 => Ok(Architecture::MlpSmall),
        1 => Ok(Architecture::CnnSmall),
        other => Err(HaamError::CheckpointParse(format!(
            "unknown architecture tag {other}"
        ))),
    }
}

/// Serialize a model. The layout is: magic, architecture tag, input shape,
/// class count, then each parameter array as rank, dims, and values.
pub fn write_model(path: &Path, model: &ModelSpec) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_u8(arch_tag(model.architecture()))?;
    let (h, w, c) = model.input_shape();
    for dim in [h, w, c, model.num_classes()] {
        out.write_u32::<LittleEndian>(dim as u32)?;
    }
    let arrays = model.param_arrays();
    out.write_u32::<LittleEndian>(arrays.len() as u32)?;
    for array in arrays {
        out.write_u32::<LittleEndian>(array.ndim() as u32)?;
        for &d in array.shape() {
            out.write_u32::<LittleEndian>(d as u32)?;
        }
        for &v in array.iter() {
            out.write_f64::<LittleEndian>(v)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Deserialize a model, validating the magic, architecture tag, array
/// shapes, and value finiteness.
pub fn read_model(path: &Path) -> Result<ModelSpec> {
    let mut input = BufReader::new(File::open(path)?);
    let fail = |msg: String| HaamError::CheckpointParse(format!("{}: {msg}", path.display()));

    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|_| fail("file shorter than the magic header".into()))?;
    if &magic != MAGIC {
        return Err(fail(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let architecture = arch_from_tag(input.read_u8()?)?;
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        *d = input.read_u32::<LittleEndian>()? as usize;
    }
    let array_count = input.read_u32::<LittleEndian>()? as usize;
    let mut arrays = Vec::with_capacity(array_count);
    for index in 0..array_count {
        let ndim = input.read_u32::<LittleEndian>()? as usize;
        if ndim > 8 {
            return Err(fail(format!("parameter array {index} has rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(input.read_u32::<LittleEndian>()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            values.push(
                input
                    .read_f64::<LittleEndian>()
                    .map_err(|_| fail(format!("parameter array {index} is truncated")))?,
            );
        }
        arrays.push(
            ArrayD::from_shape_vec(shape, values).expect("length matches shape product"),
        );
    }
    ModelSpec::from_arrays(architecture, (dims[0], dims[1], dims[2]), dims[3], arrays)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = ModelSpec::init(Architecture::CnnSmall, (28, 28, 1), 10, 123).unwrap();
        write_model(&path, &model).unwrap();
        let first_bytes = std::fs::read(&path).unwrap();
        assert!(first_bytes.starts_with(b"HAAMMDL1"));

        let loaded = read_model(&path).unwrap();
        assert_eq!(&loaded, &model);
        write_model(&path, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first_bytes);
    }

    #[test]
    fn rejects_corrupted_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = ModelSpec::init(Architecture::MlpSmall, (28, 28, 1), 10, 5).unwrap();
        write_model(&path, &model).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad_magic = dir.path().join("bad.ckpt");
        std::fs::write(&bad_magic, &bytes).unwrap();
        assert!(matches!(
            read_model(&bad_magic),
            Err(HaamError::CheckpointParse(_))
        ));

        let truncated = dir.path().join("short.ckpt");
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&truncated, &full[..full.len() / 2]).unwrap();
        assert!(matches!(
            read_model(&truncated),
            Err(HaamError::CheckpointParse(_))
        ));
    }
}
