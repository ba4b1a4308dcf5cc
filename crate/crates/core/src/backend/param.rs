use std::collections::HashMap;

use rand::Rng;

use super::tensor::Shape;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StatsId(pub(crate) usize);

/// A trainable array with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
    pub grad: Vec<f32>,
}

impl ParamTensor {
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rank-4 view used when the parameter enters a recording. Rank-1
    /// parameters (biases, norm scale/shift) map to `[len, 1, 1, 1]`.
    pub fn shape4(&self) -> Shape {
        let mut d = [1usize; 4];
        for (slot, &v) in d.iter_mut().zip(&self.dims) {
            *slot = v;
        }
        Shape::new(d[0], d[1], d[2], d[3])
    }
}

/// Ordered, name-addressable collection of model parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<ParamTensor>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<ParamId> {
        let name = name.into();
        let numel: usize = dims.iter().product();
        if numel != data.len() || dims.is_empty() || dims.len() > 4 {
            return Err(Error::contract(
                "param",
                format!("`{name}`: {} values for dims {dims:?}", data.len()),
            ));
        }
        if self.by_name.contains_key(&name) {
            return Err(Error::contract("param", format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(ParamTensor {
            name,
            dims,
            grad: vec![0.0; numel],
            data,
        });
        Ok(ParamId(id))
    }

    /// Conv weight `[out, in, k, k]` drawn Kaiming-uniform over fan-in.
    pub fn add_kaiming<R: Rng>(
        &mut self,
        name: impl Into<String>,
        out_ch: usize,
        in_ch: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let fan_in = (in_ch * k * k) as f32;
        let bound = (6.0 / fan_in).sqrt();
        let data = (0..out_ch * in_ch * k * k)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        self.add(name, vec![out_ch, in_ch, k, k], data)
    }

    pub fn add_constant(&mut self, name: impl Into<String>, len: usize, value: f32) -> Result<ParamId> {
        self.add(name, vec![len], vec![value; len])
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamTensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.id(name).map(|id| &mut self.params[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }
}

/// Batch-norm running statistics. Not trained by gradient; persisted in checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub name: String,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StatsStore {
    stats: Vec<RunningStats>,
}

impl StatsStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        let id = self.stats.len();
        self.stats.push(RunningStats {
            name: name.into(),
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        });
        StatsId(id)
    }

    pub fn get(&self, id: StatsId) -> &RunningStats {
        &self.stats[id.0]
    }

    pub fn get_mut(&mut self, id: StatsId) -> &mut RunningStats {
        &mut self.stats[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&RunningStats> {
        self.stats.iter().find(|s| s.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut RunningStats> {
        self.stats.iter_mut().find(|s| s.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &RunningStats> {
        self.stats.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut RunningStats> {
        self.stats.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }
}
