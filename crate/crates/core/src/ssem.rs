//! SSEM binary matrix format.
//!
//! Layout: magic `SSEM`, version byte (1), u32 rows, u32 cols (little-endian),
//! then row-major f32 data. Used for feature matrices, embedding sets and
//! precomputed image features; trivially parseable from any language.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SSEM";
const VERSION: u8 = 1;

pub fn write_matrix(m: &Array2<f32>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u8(VERSION)?;
    w.write_u32::<LittleEndian>(m.nrows() as u32)?;
    w.write_u32::<LittleEndian>(m.ncols() as u32)?;
    for &v in m.iter() {
        w.write_f32::<LittleEndian>(v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<Array2<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format(format!("{}: truncated header", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("{}: bad magic", path.display())));
    }
    let version = r
        .read_u8()
        .map_err(|_| Error::Format(format!("{}: truncated header", path.display())))?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let rows = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::Format(format!("{}: truncated header", path.display())))? as usize;
    let cols = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::Format(format!("{}: truncated header", path.display())))? as usize;
    let mut data = vec![0f32; rows * cols];
    for v in data.iter_mut() {
        *v = r
            .read_f32::<LittleEndian>()
            .map_err(|_| Error::Format(format!("{}: truncated data section", path.display())))?;
    }
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    #[test]
    fn round_trip_zero_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.ssem");
        let m = Array2::<f32>::zeros((1, 13));
        write_matrix(&m, &path).unwrap();
        assert_eq!(read_matrix(&path).unwrap(), m);
    }

    #[test]
    fn truncated_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ssem");
        let m = Array2::<f32>::zeros((4, 13));
        write_matrix(&m, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        match read_matrix(&path) {
            Err(Error::Format(_)) => {}
            other => panic!("expected FormatError, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ssem");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(read_matrix(&path), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(rows in 1usize..40, cols in 1usize..20, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = Array2::from_shape_fn((rows, cols), |_| rng.gen::<f32>() * 2.0 - 1.0);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("r.ssem");
            write_matrix(&m, &path).unwrap();
            let back = read_matrix(&path).unwrap();
            prop_assert!(m.iter().zip(back.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
