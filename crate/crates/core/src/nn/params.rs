use candle_core::{DType, Device, Tensor, Var};
use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Named parameters in insertion order, which is also their serialization order.
///
/// A frozen view shares storage with the original but hands out detached
/// tensors, so nothing computed from it ever receives a gradient.
#[derive(Clone)]
pub struct ParamStore {
    entries: IndexMap<String, Var>,
    frozen: bool,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device) -> Self {
        Self { entries: IndexMap::new(), frozen: false, dtype, device: device.clone() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        let value = value.to_dtype(self.dtype)?.to_device(&self.device)?;
        self.entries.insert(name.to_string(), Var::from_tensor(&value)?);
        Ok(())
    }

    pub fn normal(&mut self, rng: &mut ChaCha8Rng, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let t = (super::randn(rng, shape, DType::F64, &Device::Cpu)? * std)?;
        self.insert(name, t)
    }

    pub fn fill(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        let t = (Tensor::ones(shape, DType::F64, &Device::Cpu)? * value)?;
        self.insert(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.fill(name, shape, 0.0)
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        let var = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        if self.frozen {
            Ok(var.as_tensor().detach())
        } else {
            Ok(var.as_tensor().clone())
        }
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.entries.get(name)
    }

    /// Overwrites the value of an existing parameter (shape must match).
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        Ok(())
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.values().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn frozen(&self) -> Self {
        Self { frozen: true, ..self.clone() }
    }

    /// Deep copy with independent storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = Self::new(self.dtype, &self.device);
        out.frozen = self.frozen;
        for (name, var) in &self.entries {
            out.entries.insert(name.clone(), Var::from_tensor(&var.as_tensor().copy()?)?);
        }
        Ok(out)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut out = Self::new(dtype, &self.device);
        out.frozen = self.frozen;
        for (name, var) in &self.entries {
            out.insert(name, var.as_tensor().clone())?;
        }
        Ok(out)
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|v| v.elem_count()).sum()
    }

    /// FNV-1a over the f32 bit patterns of every parameter, in order.
    pub fn checksum(&self) -> Result<u64> {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, var) in &self.entries {
            for b in name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
            }
            let values = var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            for v in values {
                for b in v.to_bits().to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
                }
            }
        }
        Ok(h)
    }
}
