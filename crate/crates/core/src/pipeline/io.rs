//! Tensor dump format: a raw little-endian row-major payload per tensor,
//! a JSON sidecar with name, dtype and shape, and a manifest naming every
//! tensor of a set.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VtpError};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<String>,
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
        return Err(VtpError::Config(format!("invalid tensor name {name:?}")));
    }
    Ok(())
}

pub fn write_tensor(dir: &Path, name: &str, t: &Tensor, dtype: DType) -> Result<()> {
    check_name(name)?;
    let payload: Vec<u8> = match dtype {
        DType::F64 => t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F32 => t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect(),
    };
    fs::write(dir.join(format!("{name}.bin")), payload)?;
    let meta = TensorMeta {
        name: name.to_string(),
        dtype,
        shape: t.shape().to_vec(),
    };
    fs::write(dir.join(format!("{name}.json")), serde_json::to_string(&meta)?)?;
    Ok(())
}

pub fn read_tensor(dir: &Path, name: &str) -> Result<Tensor> {
    check_name(name)?;
    let meta: TensorMeta = serde_json::from_str(&fs::read_to_string(dir.join(format!("{name}.json")))?)?;
    let bytes = fs::read(dir.join(format!("{name}.bin")))?;
    let n: usize = meta.shape.iter().product();
    let width = match meta.dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    if bytes.len() != n * width {
        return Err(VtpError::Shape(format!(
            "{name}: payload has {} bytes, shape {:?} needs {}",
            bytes.len(),
            meta.shape,
            n * width
        )));
    }
    let data = match meta.dtype {
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
    };
    Tensor::new(&meta.shape, data)
}

/// Writes every tensor and a manifest listing them in order.
pub fn write_tensor_set(dir: &Path, tensors: &[(String, &Tensor)], dtype: DType) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, t) in tensors {
        write_tensor(dir, name, t, dtype)?;
    }
    let manifest = Manifest {
        tensors: tensors.iter().map(|(n, _)| n.clone()).collect(),
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_tensor_set(dir: &Path) -> Result<Vec<(String, Tensor)>> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    manifest
        .tensors
        .into_iter()
        .map(|n| {
            let t = read_tensor(dir, &n)?;
            Ok((n, t))
        })
        .collect()
}
