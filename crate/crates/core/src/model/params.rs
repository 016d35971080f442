use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Named parameters and buffers of one part of a network.
///
/// Buffers (batch-norm running statistics) are saved and digested with the
/// parameters but never handed to an optimizer.
#[derive(Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn param(&mut self, name: impl Into<String>, init: Tensor) -> Result<Var> {
        let var = Var::from_tensor(&init)?;
        self.params.insert(name.into(), var.clone());
        Ok(var)
    }

    pub fn buffer(&mut self, name: impl Into<String>, init: Tensor) -> Result<Var> {
        let var = Var::from_tensor(&init)?;
        self.buffers.insert(name.into(), var.clone());
        Ok(var)
    }

    pub fn trainable(&self) -> Vec<Var> {
        self.params.values().cloned().collect()
    }

    /// Trainable variables whose name starts with `prefix`.
    pub fn trainable_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.params.len() + self.buffers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every parameter and buffer in name order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut all: Vec<(String, Tensor)> = self
            .params
            .iter()
            .chain(self.buffers.iter())
            .map(|(n, v)| (n.clone(), v.as_detached_tensor()))
            .collect();
        all.sort_by(|a, b| a.0.cmp(&b.0));
        all
    }

    /// Deep copy of every value, for best-checkpoint bookkeeping.
    pub fn snapshot(&self) -> Result<Vec<(String, Tensor)>> {
        self.named_tensors()
            .into_iter()
            .map(|(n, t)| Ok((n, t.copy()?)))
            .collect()
    }

    /// Overwrites values by name. Every stored name must be present in `values`
    /// unless `allow_missing` is set.
    pub fn load(&self, values: &HashMap<String, Tensor>, allow_missing: bool) -> Result<usize> {
        let mut loaded = 0;
        for (name, var) in self.params.iter().chain(self.buffers.iter()) {
            match values.get(name) {
                Some(t) => {
                    if t.dims() != var.dims() {
                        return Err(Error::Shape(format!(
                            "{name}: stored {:?}, expected {:?}",
                            t.dims(),
                            var.dims()
                        )));
                    }
                    var.set(&t.to_dtype(var.dtype())?.to_device(var.device())?)?;
                    loaded += 1;
                }
                None if allow_missing => {}
                None => return Err(Error::Shape(format!("missing tensor `{name}`"))),
            }
        }
        Ok(loaded)
    }

    pub fn restore(&self, snapshot: &[(String, Tensor)]) -> Result<()> {
        let map: HashMap<String, Tensor> = snapshot.iter().cloned().collect();
        self.load(&map, false).map(|_| ())
    }

    /// SHA-256 over names, shapes and raw little-endian values.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            for d in t.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

/// Seeded initialisers. Everything goes through these so that a seed fully
/// determines the initial network.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub device: &'a Device,
}

impl Init<'_> {
    pub fn uniform(&mut self, dims: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        let dist = Uniform::new_inclusive(-bound as f32, bound as f32)
            .map_err(|e| Error::Numeric(e.to_string()))?;
        let data: Vec<f32> = (0..n).map(|_| dist.sample(self.rng)).collect();
        Ok(Tensor::from_vec(data, dims, self.device)?)
    }

    pub fn normal(&mut self, dims: &[usize], mean: f64, std: f64) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        let dist = Normal::new(mean as f32, std as f32).map_err(|e| Error::Numeric(e.to_string()))?;
        let data: Vec<f32> = (0..n).map(|_| dist.sample(self.rng)).collect();
        Ok(Tensor::from_vec(data, dims, self.device)?)
    }

    pub fn constant(&mut self, dims: &[usize], value: f32) -> Result<Tensor> {
        Ok(Tensor::full(value, dims, self.device)?)
    }

    /// Default PyTorch layer init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn fan_in_uniform(&mut self, dims: &[usize], fan_in: usize) -> Result<Tensor> {
        self.uniform(dims, 1.0 / (fan_in as f64).sqrt())
    }

    pub fn xavier_normal(&mut self, dims: &[usize], fan_in: usize, fan_out: usize) -> Result<Tensor> {
        self.normal(dims, 0.0, (2.0 / (fan_in + fan_out) as f64).sqrt())
    }

    /// He init scaled by fan-out, as torchvision uses for ResNet convolutions.
    pub fn kaiming_fan_out(&mut self, dims: &[usize], fan_out: usize) -> Result<Tensor> {
        self.normal(dims, 0.0, (2.0 / fan_out as f64).sqrt())
    }

    pub fn bernoulli_keep(&mut self, n: usize, keep: f64) -> Vec<bool> {
        (0..n).map(|_| self.rng.random::<f64>() < keep).collect()
    }
}
