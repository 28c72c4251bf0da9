//! Parameter checkpoints: one file holding a single-line JSON header
//! (tensor names, shapes, precision) followed by the raw little-endian
//! scalar payloads in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize, Debug)]
pub struct CheckpointHeader {
    pub precision: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize, Debug)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

pub fn save_checkpoint<S: Scalar>(path: &Path, tensors: &[(String, Tensor<S>)]) -> Result<()> {
    let header = CheckpointHeader {
        precision: S::NAME.to_string(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.dims().to_vec(),
            })
            .collect(),
    };
    let mut writer = BufWriter::new(File::create(path)?);
    let mut line = serde_json::to_string(&header)?;
    line.push('\n');
    writer.write_all(line.as_bytes())?;
    let mut payload = Vec::new();
    for (_, t) in tensors {
        for &v in t.data().iter() {
            v.write_le(&mut payload);
        }
    }
    writer.write_all(&payload)?;
    Ok(())
}

/// Read just the header — used to pick the right precision before loading.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let mut reader = BufReader::new(File::open(path)?);
    let line = read_header_line(&mut reader, path)?;
    Ok(serde_json::from_str(&line)?)
}

/// Load a checkpoint into an existing set of tensors. Names must appear in
/// file order and shapes must match; this keeps loading a pure data
/// operation with no model surgery.
pub fn load_checkpoint<S: Scalar>(path: &Path, tensors: &[(String, Tensor<S>)]) -> Result<()> {
    let mut reader = BufReader::new(File::open(path)?);
    let line = read_header_line(&mut reader, path)?;
    let header: CheckpointHeader = serde_json::from_str(&line)?;
    if header.precision != S::NAME {
        return Err(CoreError::Checkpoint(format!(
            "precision mismatch: file holds {}, loading as {}",
            header.precision,
            S::NAME
        )));
    }
    if header.tensors.len() != tensors.len() {
        return Err(CoreError::Checkpoint(format!(
            "tensor count mismatch: file holds {}, target has {}",
            header.tensors.len(),
            tensors.len()
        )));
    }
    for (entry, (name, tensor)) in header.tensors.iter().zip(tensors) {
        if entry.name != *name {
            return Err(CoreError::Checkpoint(format!(
                "tensor name mismatch: file has '{}', target expects '{}'",
                entry.name, name
            )));
        }
        if entry.shape != tensor.dims() {
            return Err(CoreError::Checkpoint(format!(
                "shape mismatch for '{}': file {:?}, target {:?}",
                name,
                entry.shape,
                tensor.dims()
            )));
        }
        let count: usize = entry.shape.iter().product::<usize>().max(1);
        let mut bytes = vec![0u8; count * S::BYTES];
        reader.read_exact(&mut bytes).map_err(|e| {
            CoreError::Checkpoint(format!("truncated payload for '{name}': {e}"))
        })?;
        let data: Vec<S> = bytes.chunks_exact(S::BYTES).map(S::read_le).collect();
        tensor.set_data(data)?;
    }
    Ok(())
}

fn read_header_line(reader: &mut impl Read, path: &Path) -> Result<String> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        reader.read_exact(&mut byte).map_err(|_| CoreError::FileFormat {
            path: path.display().to_string(),
            message: "missing newline-terminated JSON header".into(),
        })?;
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
        if line.len() > 1 << 20 {
            return Err(CoreError::FileFormat {
                path: path.display().to_string(),
                message: "header exceeds 1 MiB".into(),
            });
        }
    }
    String::from_utf8(line).map_err(|_| CoreError::FileFormat {
        path: path.display().to_string(),
        message: "header is not valid UTF-8".into(),
    })
}
