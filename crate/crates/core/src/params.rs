//! Named parameter storage shared by all network modules.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Updated by forward passes (tdBN running statistics).
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>, kind: ParamKind) -> ParamId {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.params.push(Param {
            name: name.into(),
            dims,
            data,
            kind,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn constant(&mut self, name: impl Into<String>, dims: Vec<usize>, value: f64, kind: ParamKind) -> ParamId {
        let len = dims.iter().product();
        self.add(name, dims, vec![value; len], kind)
    }

    /// Zero-mean uniform weights with variance `2 / fan_in`.
    pub fn he_uniform(&mut self, name: impl Into<String>, dims: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let len = dims.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, dims, data, ParamKind::Trainable)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].data
    }

    pub fn scalar(&self, id: ParamId) -> f64 {
        self.params[id.0].data[0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.data.len())
            .sum()
    }

    /// Copies values from `other`, matching entries by position and name.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Format(format!(
                "parameter count mismatch: model has {}, file has {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.dims != src.dims {
                return Err(Error::Format(format!(
                    "parameter {} {:?} does not match file entry {} {:?}",
                    dst.name, dst.dims, src.name, src.dims
                )));
            }
            dst.data.clone_from(&src.data);
        }
        Ok(())
    }
}
