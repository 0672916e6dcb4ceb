//! Single-file archives of named `f64` matrices plus string metadata, stored
//! in the safetensors layout (JSON header with names, shapes and dtypes,
//! followed by little-endian data).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::autograd::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct Archive {
    pub arrays: IndexMap<String, Matrix>,
    pub metadata: BTreeMap<String, String>,
}

impl Archive {
    pub fn array(&self, name: &str) -> Result<&Matrix> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("archive has no array `{name}`")))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("archive metadata lacks `{key}`")))
    }
}

fn to_bytes(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.len() * 8);
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_archive(path: &Path, archive: &Archive) -> Result<()> {
    let buffers: Vec<(String, Vec<u8>, Vec<usize>)> = archive
        .arrays
        .iter()
        .map(|(name, m)| (name.clone(), to_bytes(m), vec![m.nrows(), m.ncols()]))
        .collect();
    let views = buffers
        .iter()
        .map(|(name, bytes, shape)| {
            let view = TensorView::new(Dtype::F64, shape.clone(), bytes)
                .map_err(|e| Error::Checkpoint(format!("array `{name}`: {e}")))?;
            Ok((name.clone(), view))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta: HashMap<String, String> = archive.metadata.clone().into_iter().collect();
    let bytes = safetensors::serialize(views, &Some(meta))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: safetensors::SafeTensorError| Error::Checkpoint(format!("{}: {e}", path.display()));
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(bad)?;
    let tensors = SafeTensors::deserialize(&bytes).map_err(bad)?;

    let mut names: Vec<String> = tensors.names().into_iter().cloned().collect();
    names.sort();
    let mut arrays = IndexMap::new();
    for name in names {
        let view = tensors.tensor(&name).map_err(bad)?;
        if view.dtype() != Dtype::F64 || view.shape().len() != 2 {
            return Err(Error::Checkpoint(format!(
                "{}: array `{name}` must be 2-D f64, found {:?} {:?}",
                path.display(),
                view.dtype(),
                view.shape()
            )));
        }
        let values: Vec<f64> = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let m = Matrix::from_shape_vec((view.shape()[0], view.shape()[1]), values)
            .map_err(|e| Error::Checkpoint(format!("array `{name}`: {e}")))?;
        arrays.insert(name, m);
    }
    let metadata = header
        .metadata()
        .clone()
        .unwrap_or_default()
        .into_iter()
        .collect();
    Ok(Archive { arrays, metadata })
}
