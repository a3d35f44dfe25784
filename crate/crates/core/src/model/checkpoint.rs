//! Binary model checkpoints.
//!
//! Layout: the magic `KETCKPT1`, a length-prefixed UTF-8 config echo, the
//! parameter count, then per parameter a length-prefixed name, a shape
//! header (ndim + dims, u64 little-endian), and the row-major f64 data,
//! little-endian. A plain-text manifest of names and shapes is written
//! alongside the checkpoint.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{KetModel, ModelError};
use crate::tensor::Parameter;

const MAGIC: &[u8; 8] = b"KETCKPT1";

pub fn manifest_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    name.push_str(".manifest.txt");
    checkpoint.with_file_name(name)
}

/// Write the checkpoint and its manifest. `config_echo` is stored verbatim
/// (the CLI passes the full run configuration as one JSON line).
pub fn save(path: &Path, config_echo: &str, params: &[Parameter]) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_bytes(&mut w, config_echo.as_bytes())?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for p in params {
        write_bytes(&mut w, p.name.as_bytes())?;
        let shape = p.tensor.shape();
        w.write_all(&(shape.len() as u64).to_le_bytes())?;
        for &dim in shape {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for v in p.tensor.data().iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;

    let mut manifest = BufWriter::new(File::create(manifest_path(path))?);
    writeln!(manifest, "# config {config_echo}")?;
    for p in params {
        writeln!(manifest, "{}\t{:?}", p.name, p.tensor.shape())?;
    }
    manifest.flush()?;
    Ok(())
}

#[derive(Debug)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub config_echo: String,
    pub entries: Vec<CheckpointEntry>,
}

pub fn load(path: &Path) -> Result<LoadedCheckpoint, ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::CorruptCheckpoint(format!(
            "{}: bad magic",
            path.display()
        )));
    }
    let echo_bytes = read_bytes(&mut r)?;
    let config_echo = String::from_utf8(echo_bytes)
        .map_err(|_| ModelError::CorruptCheckpoint("config echo is not UTF-8".into()))?;
    let count = read_u64(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name = String::from_utf8(read_bytes(&mut r)?)
            .map_err(|_| ModelError::CorruptCheckpoint("parameter name is not UTF-8".into()))?;
        let ndim = read_u64(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        entries.push(CheckpointEntry { name, shape, data });
    }
    Ok(LoadedCheckpoint {
        config_echo,
        entries,
    })
}

impl KetModel {
    /// Copy checkpoint data into this model. Every parameter must be
    /// present with an identical shape, and no extra entries are allowed.
    pub fn load_checkpoint(&self, ckpt: &LoadedCheckpoint) -> Result<(), ModelError> {
        if ckpt.entries.len() != self.parameters().len() {
            return Err(ModelError::CheckpointMismatch(format!(
                "checkpoint has {} parameters, model expects {}",
                ckpt.entries.len(),
                self.parameters().len()
            )));
        }
        for param in self.parameters() {
            let entry = ckpt
                .entries
                .iter()
                .find(|e| e.name == param.name)
                .ok_or_else(|| {
                    ModelError::CheckpointMismatch(format!("missing parameter {}", param.name))
                })?;
            if entry.shape != param.tensor.shape() {
                return Err(ModelError::CheckpointMismatch(format!(
                    "parameter {} has shape {:?} in the checkpoint, model expects {:?}",
                    param.name,
                    entry.shape,
                    param.tensor.shape()
                )));
            }
            param.tensor.set_data(&entry.data);
        }
        Ok(())
    }
}

fn write_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> std::io::Result<()> {
    w.write_all(&(bytes.len() as u64).to_le_bytes())?;
    w.write_all(bytes)
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_bytes<R: Read>(r: &mut R) -> std::io::Result<Vec<u8>> {
    let len = read_u64(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}
