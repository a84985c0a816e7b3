//! Model checkpoint container: named f32 tensors plus an opaque config
//! string and, optionally, the Adam optimizer state needed to resume
//! training.
//!
//! Layout (all integers little-endian):
//! ```text
//! magic "SSCK" | version u8 | meta len u32 + utf-8 bytes
//! | epochs_done u32
//! | tensor count u32 | per tensor: name (u32 + bytes), rows u32,
//!   cols u32, row-major f32 data
//! | adam flag u8 | if 1: step u64, then m and v tensor blocks with
//!   the same names/shapes as the parameters
//! ```

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{AdamState, ParamSet};

const MAGIC: &[u8; 4] = b"SSCK";
const VERSION: u8 = 1;

/// Everything needed to reload or resume a training run.
pub struct Checkpoint {
    /// Opaque run-configuration text, reproduced verbatim on load.
    pub meta: String,
    /// Number of completed training epochs (0 for a fresh model).
    pub epochs_done: u32,
    pub params: ParamSet<f32>,
    pub adam: Option<AdamState<f32>>,
}

fn write_tensor<W: Write>(w: &mut W, name: &str, t: &Array2<f32>) -> Result<()> {
    w.write_u32::<LittleEndian>(name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    w.write_u32::<LittleEndian>(t.nrows() as u32)?;
    w.write_u32::<LittleEndian>(t.ncols() as u32)?;
    for v in t.iter() {
        w.write_f32::<LittleEndian>(*v)?;
    }
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R) -> Result<(String, Array2<f32>)> {
    let name_len = r.read_u32::<LittleEndian>()? as usize;
    if name_len > 4096 {
        return Err(Error::Format(format!("implausible tensor name length {name_len}")));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name)
        .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
    let rows = r.read_u32::<LittleEndian>()? as usize;
    let cols = r.read_u32::<LittleEndian>()? as usize;
    let mut data = vec![0f32; rows * cols];
    for v in data.iter_mut() {
        *v = r.read_f32::<LittleEndian>()?;
    }
    let t = Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
    Ok((name, t))
}

fn write_named_block<'a, W: Write>(
    w: &mut W,
    tensors: impl Iterator<Item = (&'a String, &'a Array2<f32>)>,
) -> Result<()> {
    let tensors: Vec<_> = tensors.collect();
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for (name, t) in tensors {
        write_tensor(w, name, t)?;
    }
    Ok(())
}

fn read_named_block<R: Read>(r: &mut R) -> Result<BTreeMap<String, Array2<f32>>> {
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let (name, t) = read_tensor(r)?;
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u8(VERSION)?;
    w.write_u32::<LittleEndian>(ckpt.meta.len() as u32)?;
    w.write_all(ckpt.meta.as_bytes())?;
    w.write_u32::<LittleEndian>(ckpt.epochs_done)?;
    write_named_block(&mut w, ckpt.params.iter())?;
    match &ckpt.adam {
        None => w.write_u8(0)?,
        Some(adam) => {
            w.write_u8(1)?;
            w.write_u64::<LittleEndian>(adam.step)?;
            write_named_block(&mut w, adam.m.iter())?;
            write_named_block(&mut w, adam.v.iter())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let version = r.read_u8()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let meta_len = r.read_u32::<LittleEndian>()? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)?;
    let meta =
        String::from_utf8(meta).map_err(|_| Error::Format("checkpoint meta is not utf-8".into()))?;
    let epochs_done = r.read_u32::<LittleEndian>()?;
    let tensors = read_named_block(&mut r)?;
    let mut params = ParamSet::new();
    for (name, t) in tensors {
        params.insert(name, t);
    }
    let adam = match r.read_u8()? {
        0 => None,
        1 => {
            let step = r.read_u64::<LittleEndian>()?;
            let m = read_named_block(&mut r)?;
            let v = read_named_block(&mut r)?;
            for (name, _) in params.iter() {
                if !m.contains_key(name) || !v.contains_key(name) {
                    return Err(Error::Format(format!(
                        "optimizer state missing tensor {name}"
                    )));
                }
            }
            Some(AdamState { step, m, v })
        }
        other => {
            return Err(Error::Format(format!(
                "invalid optimizer-state flag {other}"
            )))
        }
    };
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format(format!(
            "{}: trailing bytes after checkpoint payload",
            path.display()
        )));
    }
    Ok(Checkpoint {
        meta,
        epochs_done,
        params,
        adam,
    })
}
