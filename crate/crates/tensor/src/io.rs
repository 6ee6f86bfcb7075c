use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use safetensors::{Dtype, SafeTensors};

use crate::{Element, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Fs { path: String, source: std::io::Error },
    #[error("{path}: malformed tensor archive: {msg}")]
    Format { path: String, msg: String },
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let fs_err = |source| IoError::Fs { path: path.display().to_string(), source };
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(fs_err)?;
    let file_name = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{file_name}.tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp).map_err(fs_err)?;
        f.write_all(bytes).map_err(fs_err)?;
        f.sync_all().map_err(fs_err)?;
    }
    std::fs::rename(&tmp, path).map_err(fs_err)
}

/// Serialises named tensors plus string metadata into one safetensors file.
pub fn save_tensors<T: Element>(
    path: &Path,
    tensors: &[(String, Tensor<T>)],
    metadata: HashMap<String, String>,
) -> Result<(), IoError> {
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> =
        tensors.iter().map(|(n, t)| (n.clone(), T::to_le_bytes_vec(t.data()), t.shape().to_vec())).collect();
    let views = bytes
        .iter()
        .map(|(n, b, s)| {
            safetensors::tensor::TensorView::new(T::DTYPE, s.clone(), b).map(|v| (n.clone(), v))
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| IoError::Format { path: path.display().to_string(), msg: e.to_string() })?;
    let data = safetensors::serialize(views, Some(metadata))
        .map_err(|e| IoError::Format { path: path.display().to_string(), msg: e.to_string() })?;
    atomic_write(path, &data)
}

/// A loaded archive: tensors in file order plus metadata.
pub struct LoadedTensors<T> {
    pub tensors: Vec<(String, Tensor<T>)>,
    pub metadata: HashMap<String, String>,
}

/// Reads a safetensors file, converting F32/F64/F16-free payloads into `T`.
pub fn load_tensors<T: Element>(path: &Path) -> Result<LoadedTensors<T>, IoError> {
    let p = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|source| IoError::Fs { path: p.clone(), source })?;
    let fmt = |msg: String| IoError::Format { path: p.clone(), msg };
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| fmt(e.to_string()))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| fmt(e.to_string()))?;
    let mut names: Vec<String> = st.names().into_iter().map(str::to_string).collect();
    names.sort();
    let mut tensors = Vec::with_capacity(names.len());
    for name in names {
        let view = st.tensor(&name).map_err(|e| fmt(e.to_string()))?;
        let raw = view.data();
        let data: Vec<T> = match view.dtype() {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| T::c(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| T::c(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
                .collect(),
            Dtype::I64 => raw
                .chunks_exact(8)
                .map(|c| T::c(i64::from_le_bytes(c.try_into().expect("8-byte chunk")) as f64))
                .collect(),
            other => return Err(fmt(format!("tensor {name} has unsupported dtype {other:?}"))),
        };
        tensors.push((name, Tensor::new(view.shape(), data)));
    }
    Ok(LoadedTensors { tensors, metadata: meta.metadata().clone().unwrap_or_default() })
}
