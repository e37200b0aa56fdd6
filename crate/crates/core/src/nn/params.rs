use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

struct Entry {
    name: String,
    var: Var,
    trainable: bool,
}

/// Named parameter and buffer registry for one model.
///
/// Initialization draws from a seeded ChaCha stream in registration order,
/// so building the same architecture twice with the same seed gives
/// bit-identical values.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
            entries: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, t: Tensor, trainable: bool) -> Result<Var> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        self.entries.push(Entry { name: name.to_string(), var: var.clone(), trainable });
        Ok(var)
    }

    /// Xavier (Glorot) uniform init on U(-a, a), a = sqrt(6 / (fan_in + fan_out)).
    pub fn xavier(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<Var> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| self.rng.gen_range(-a..a)).collect();
        let t = Tensor::from_vec(v, shape, &self.device)?;
        self.insert(name, t, true)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        let t = Tensor::zeros(shape, self.dtype, &self.device)?;
        self.insert(name, t, true)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        let t = Tensor::ones(shape, self.dtype, &self.device)?;
        self.insert(name, t, true)
    }

    /// Non-trainable state such as running statistics.
    pub fn buffer(&mut self, name: &str, t: Tensor) -> Result<Var> {
        self.insert(name, t, false)
    }

    /// Trainable variables whose names start with any of `prefixes`.
    pub fn trainable(&self, prefixes: &[&str]) -> Vec<Var> {
        self.entries
            .iter()
            .filter(|e| e.trainable && prefixes.iter().any(|p| e.name.starts_with(p)))
            .map(|e| e.var.clone())
            .collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.name.starts_with(prefix))
            .map(|e| e.var.elem_count())
            .sum()
    }

    /// SHA-256 over names and values of all trainable parameters under `prefix`.
    pub fn hash(&self, prefix: &str) -> Result<String> {
        let mut h = Sha256::new();
        for e in self.entries.iter().filter(|e| e.trainable && e.name.starts_with(prefix)) {
            h.update(e.name.as_bytes());
            let v: Vec<f64> = e.var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
            for x in v {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Deep copy of every parameter and buffer.
    pub fn snapshot(&self) -> Result<Vec<(String, Tensor)>> {
        self.entries
            .iter()
            .map(|e| Ok((e.name.clone(), e.var.as_tensor().copy()?)))
            .collect()
    }

    pub fn restore(&self, snap: &[(String, Tensor)]) -> Result<()> {
        let map: HashMap<&str, &Tensor> = snap.iter().map(|(n, t)| (n.as_str(), t)).collect();
        self.load_map(&map)
    }

    /// Overwrite values from a name-keyed map; every registered name must be present.
    pub fn load(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        let map: HashMap<&str, &Tensor> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        self.load_map(&map)
    }

    fn load_map(&self, map: &HashMap<&str, &Tensor>) -> Result<()> {
        for e in &self.entries {
            let t = map
                .get(e.name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", e.name)))?;
            if t.dims() != e.var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    e.name,
                    t.dims(),
                    e.var.dims()
                )));
            }
            e.var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_values_and_hash() {
        let build = |seed| {
            let mut s = ParamStore::new(DType::F32, seed);
            s.xavier("a.w", &[4, 3], 3, 4).unwrap();
            s.zeros("a.b", &[4]).unwrap();
            s
        };
        let (a, b, c) = (build(1), build(1), build(2));
        assert_eq!(a.hash("").unwrap(), b.hash("").unwrap());
        assert_ne!(a.hash("").unwrap(), c.hash("").unwrap());
    }

    #[test]
    fn xavier_bound() {
        let mut s = ParamStore::new(DType::F64, 0);
        let v = s.xavier("w", &[50, 30], 30, 50).unwrap();
        let a = (6.0f64 / 80.0).sqrt();
        let vals: Vec<f64> = v.flatten_all().unwrap().to_vec1().unwrap();
        assert!(vals.iter().all(|x| x.abs() <= a));
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 0.05);
    }

    #[test]
    fn snapshot_restore_round_trip() {
        let mut s = ParamStore::new(DType::F32, 3);
        let w = s.xavier("w", &[3, 3], 3, 3).unwrap();
        let snap = s.snapshot().unwrap();
        let h0 = s.hash("").unwrap();
        w.set(&w.as_tensor().affine(2.0, 1.0).unwrap()).unwrap();
        assert_ne!(s.hash("").unwrap(), h0);
        s.restore(&snap).unwrap();
        assert_eq!(s.hash("").unwrap(), h0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new(DType::F32, 0);
        s.zeros("x", &[1]).unwrap();
        assert!(s.zeros("x", &[1]).is_err());
    }
}
