use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numeric::{Dtype, Scalar, Tensor};

use super::{Model, ModelConfig, ModelError, Result};

const FORMAT: &str = "causalrec-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: Dtype,
    len_bytes: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

fn io_err(what: &str, path: &Path, e: std::io::Error) -> ModelError {
    ModelError::Checkpoint(format!("{what} {}: {e}", path.display()))
}

/// Writes the model as a one-line JSON manifest (config plus named tensor
/// shapes/dtypes) followed by the concatenated little-endian raw values in
/// manifest order. Round-trips bit-exactly.
pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    model.visit_params(&mut |name, t| {
        let start = payload.len();
        for &v in t.data() {
            v.write_le(&mut payload);
        }
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: T::DTYPE,
            len_bytes: payload.len() - start,
        });
    });
    let header = Header {
        format: FORMAT.to_string(),
        config: model.config().clone(),
        tensors: entries,
    };
    let file = File::create(path).map_err(|e| io_err("creating", path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &header)
        .map_err(|e| ModelError::Checkpoint(format!("encoding manifest: {e}")))?;
    w.write_all(b"\n").map_err(|e| io_err("writing", path, e))?;
    w.write_all(&payload).map_err(|e| io_err("writing", path, e))?;
    w.flush().map_err(|e| io_err("writing", path, e))?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`]. The requested scalar
/// type must match the stored dtype.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let file = File::open(path).map_err(|e| io_err("opening", path, e))?;
    let mut r = BufReader::new(file);
    let mut header_line = Vec::new();
    {
        let mut byte = [0u8; 1];
        loop {
            r.read_exact(&mut byte).map_err(|e| io_err("reading", path, e))?;
            if byte[0] == b'\n' {
                break;
            }
            header_line.push(byte[0]);
        }
    }
    let header: Header = serde_json::from_slice(&header_line)
        .map_err(|e| ModelError::Checkpoint(format!("decoding manifest: {e}")))?;
    if header.format != FORMAT {
        return Err(ModelError::Checkpoint(format!(
            "unsupported checkpoint format {:?}",
            header.format
        )));
    }

    let mut tensors: HashMap<String, Tensor<T>> = HashMap::new();
    let elem = T::DTYPE.size_bytes();
    for entry in &header.tensors {
        if entry.dtype != T::DTYPE {
            return Err(ModelError::Checkpoint(format!(
                "tensor {} has dtype {}, loader expects {}",
                entry.name,
                entry.dtype,
                T::DTYPE
            )));
        }
        let numel: usize = entry.shape.iter().product();
        if numel * elem != entry.len_bytes {
            return Err(ModelError::Checkpoint(format!(
                "tensor {} declares {} bytes for shape {:?}",
                entry.name, entry.len_bytes, entry.shape
            )));
        }
        let mut bytes = vec![0u8; entry.len_bytes];
        r.read_exact(&mut bytes).map_err(|e| io_err("reading", path, e))?;
        let data: Vec<T> = bytes.chunks_exact(elem).map(T::read_le).collect();
        tensors.insert(entry.name.clone(), Tensor::param(data, &entry.shape)?);
    }

    let mut model = Model::new(&header.config, 0)?;
    let mut missing = Vec::new();
    model.visit_params_mut(&mut |name, t| match tensors.remove(&name) {
        Some(stored) if stored.shape() == t.shape() => *t = stored,
        Some(stored) => missing.push(format!(
            "{name}: shape {:?} in file, {:?} in model",
            stored.shape(),
            t.shape()
        )),
        None => missing.push(format!("{name}: absent from checkpoint")),
    });
    if !missing.is_empty() {
        return Err(ModelError::Checkpoint(format!(
            "checkpoint does not match model: {}",
            missing.join("; ")
        )));
    }
    if !tensors.is_empty() {
        let extra: Vec<String> = tensors.into_keys().collect();
        return Err(ModelError::Checkpoint(format!(
            "checkpoint carries unknown tensors: {}",
            extra.join(", ")
        )));
    }
    Ok(model)
}
