//! Named parameter storage shared by every network module.
//!
//! Parameters live in a `BTreeMap` keyed by dotted path so that iteration
//! order, checkpoints, EMA updates and checksums are all deterministic.
//! Initialization draws from a seeded ChaCha stream rather than the
//! backend's global RNG.

use std::cell::RefCell;
use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub struct ParamStore {
    vars: RefCell<BTreeMap<String, Var>>,
    rng: RefCell<ChaCha8Rng>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device, seed: u64) -> Self {
        Self {
            vars: RefCell::new(BTreeMap::new()),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> ParamScope<'_> {
        ParamScope {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.vars.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.borrow().keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.borrow().get(name).cloned()
    }

    /// All parameters in key order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.vars
            .borrow()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.borrow().values().map(|v| v.elem_count()).sum()
    }

    /// Detached copies of every parameter.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        let vars = self.vars.borrow();
        let mut out = BTreeMap::new();
        for (name, var) in vars.iter() {
            out.insert(name.clone(), var.as_tensor().detach().copy()?);
        }
        Ok(out)
    }

    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let vars = self.vars.borrow();
        let var = vars
            .get(name)
            .ok_or_else(|| Error::InvalidCheckpoint(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::shape(name, var.dims(), value.dims()));
        }
        var.set(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        Ok(())
    }

    /// Overwrites parameters whose name starts with one of `prefixes` (all of
    /// them when `prefixes` is empty). Every matching parameter must be
    /// present in `tensors`. Returns the number of parameters written.
    pub fn load_from(&self, tensors: &BTreeMap<String, Tensor>, prefixes: &[&str]) -> Result<usize> {
        let mut written = 0;
        for name in self.names() {
            if !prefixes.is_empty() && !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            let value = tensors
                .get(&name)
                .ok_or_else(|| Error::InvalidCheckpoint(format!("parameter {name} not found")))?;
            self.set(&name, value)?;
            written += 1;
        }
        Ok(written)
    }

    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        let snapshot = other.snapshot()?;
        if snapshot.len() != self.len() {
            return Err(Error::shape("parameter count", self.len(), snapshot.len()));
        }
        self.load_from(&snapshot, &[])?;
        Ok(())
    }

    /// FNV-1a over the raw bytes of every parameter in key order.
    pub fn checksum(&self) -> Result<u64> {
        let mut hash = 0xcbf29ce484222325u64;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                hash ^= *b as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        };
        for (name, var) in self.vars.borrow().iter() {
            feed(name.as_bytes());
            let flat = var.as_tensor().flatten_all()?;
            match flat.dtype() {
                DType::F64 => {
                    for v in flat.to_vec1::<f64>()? {
                        feed(&v.to_le_bytes());
                    }
                }
                _ => {
                    for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                        feed(&v.to_le_bytes());
                    }
                }
            }
        }
        Ok(hash)
    }

    fn insert(&self, name: String, tensor: Tensor) -> Result<Tensor> {
        let var = Var::from_tensor(&tensor)?;
        let t = var.as_tensor().clone();
        let mut vars = self.vars.borrow_mut();
        if vars.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        vars.insert(name, var);
        Ok(t)
    }

    fn uniform(&self, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut rng = self.rng.borrow_mut();
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }
}

/// A view into a [`ParamStore`] under a dotted prefix.
#[derive(Clone)]
pub struct ParamScope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> ParamScope<'a> {
    pub fn pp(&self, name: impl std::fmt::Display) -> ParamScope<'a> {
        ParamScope {
            store: self.store,
            prefix: self.path(&name.to_string()),
        }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    /// He-uniform initialization, bound `sqrt(6 / fan_in)`.
    pub fn he_uniform(&self, name: &str, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let t = self.store.uniform(shape, bound)?;
        self.store.insert(self.path(name), t)
    }

    pub fn constant(&self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let t = (Tensor::ones(shape, self.store.dtype, &self.store.device)? * value)?;
        self.store.insert(self.path(name), t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_same_parameters() {
        let build = |seed| {
            let s = ParamStore::new(DType::F32, Device::Cpu, seed);
            s.root().pp("a").he_uniform("w", &[4, 3, 3, 3], 27).unwrap();
            s.root().pp("a").constant("b", &[4], 0.0).unwrap();
            s.checksum().unwrap()
        };
        assert_eq!(build(7), build(7));
        assert_ne!(build(7), build(8));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let s = ParamStore::new(DType::F32, Device::Cpu, 0);
        s.root().constant("x", &[1], 1.0).unwrap();
        assert!(s.root().constant("x", &[1], 1.0).is_err());
    }

    #[test]
    fn load_from_respects_prefixes() {
        let a = ParamStore::new(DType::F32, Device::Cpu, 0);
        a.root().pp("enc").constant("w", &[2], 1.0).unwrap();
        a.root().pp("dec").constant("w", &[2], 1.0).unwrap();
        let b = ParamStore::new(DType::F32, Device::Cpu, 0);
        b.root().pp("enc").constant("w", &[2], 5.0).unwrap();
        b.root().pp("dec").constant("w", &[2], 5.0).unwrap();
        let n = a.load_from(&b.snapshot().unwrap(), &["enc."]).unwrap();
        assert_eq!(n, 1);
        let enc = a.get("enc.w").unwrap().to_vec1::<f32>().unwrap();
        let dec = a.get("dec.w").unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(enc, vec![5.0, 5.0]);
        assert_eq!(dec, vec![1.0, 1.0]);
    }
}
