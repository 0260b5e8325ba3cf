use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::io::{self, DType};
use crate::numerics::Tensor;

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl ParamSet {
    /// Appends a tensor and returns its position.
    pub fn push(&mut self, name: String, tensor: Tensor) -> usize {
        assert!(!self.lookup.contains_key(&name), "duplicate parameter {name}");
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.lookup.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.lookup.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Writes `<dir>/<name>.pswt` for every parameter.
    pub fn save(&self, dir: &Path, dtype: DType) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, t) in self.iter() {
            io::save(dir.join(format!("{name}.pswt")), t, dtype)?;
        }
        Ok(())
    }

    /// Overwrites every parameter from `<dir>/<name>.pswt`; shapes must
    /// match.
    pub fn load(&mut self, dir: &Path) -> Result<()> {
        for i in 0..self.tensors.len() {
            let t = io::load(dir.join(format!("{}.pswt", self.names[i])))?;
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?} on disk, expected {:?}",
                    self.names[i],
                    t.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = t;
        }
        Ok(())
    }
}
