//! Named parameter sets and their on-disk checkpoint layout: one `DTNSR1`
//! file per tensor plus a `manifest.json` mapping names to files and shapes.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";

/// Parameters in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    dtype: DType,
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Records every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
                .collect(),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.len());
        for (name, t) in &self.tensors {
            let file = format!("{name}.dtnsr");
            write_tensor(dir.join(&file), t)?;
            entries.push(ManifestEntry {
                name: name.clone(),
                file,
                shape: t.shape().to_vec(),
            });
        }
        let manifest = Manifest {
            dtype: T::DTYPE,
            tensors: entries,
        };
        let path = dir.join(MANIFEST);
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let mut out = ParamSet::new();
        for entry in manifest.tensors {
            let t = read_tensor(dir.join(&entry.file))?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::Format(format!(
                    "`{}` has shape {:?}, manifest says {:?}",
                    entry.name,
                    t.shape(),
                    entry.shape
                )));
            }
            out.insert(entry.name, t.into_tensor());
        }
        Ok(out)
    }
}

/// Tape handles for a [`ParamSet`], looked up by name.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    /// Binds names to vars already on a tape.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        BoundParams {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
