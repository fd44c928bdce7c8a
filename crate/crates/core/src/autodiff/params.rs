use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::tape::Gradients;
use crate::error::{Error, Result};
use crate::grid::{Real, Tensor};

pub const WTS1_MAGIC: &[u8; 4] = b"WTS1";

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct Entry<T: Real> {
    name: String,
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    m: Tensor<T>,
    v: Tensor<T>,
}

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named trainable parameters with their gradients and Adam moments.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Real> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, ParamId>,
    step: u64,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::arg(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.entries.len());
        let zeros = Tensor::zeros(value.shape());
        self.entries.push(Entry {
            name: name.clone(),
            m: zeros.clone(),
            v: zeros,
            grad: None,
            value,
        });
        self.index.insert(name, id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.entries[id.0].grad.as_ref()
    }

    /// Number of parameter tensors.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Exact number of trainable scalars.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Scalars held by parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad = Some(Tensor::zeros(e.value.shape()));
        }
    }

    pub fn clear_grad(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// Replaces all gradients: reached parameters get their gradient, others zero.
    pub fn set_grads(&mut self, grads: &Gradients<T>) {
        self.zero_grad();
        self.accumulate_grads(grads);
    }

    /// Adds `grads` onto the stored gradients (missing ones start at zero).
    pub fn accumulate_grads(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.param_entries() {
            let e = &mut self.entries[id.0];
            let acc = e.grad.get_or_insert_with(|| Tensor::zeros(e.value.shape()));
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }

    pub fn scale_grads(&mut self, s: T) {
        for e in &mut self.entries {
            if let Some(g) = &mut e.grad {
                for v in g.data_mut() {
                    *v *= s;
                }
            }
        }
    }

    /// Global L2 norm of the stored gradients.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .filter_map(|e| e.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Bias-corrected Adam update; every parameter must carry a gradient.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some(e) = self.entries.iter().find(|e| e.grad.is_none()) {
            return Err(Error::MissingGradient(e.name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64_lossy(cfg.beta1);
        let b2 = T::from_f64_lossy(cfg.beta2);
        let c1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(t));
        let c2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(t));
        let lr = T::from_f64_lossy(cfg.lr);
        let eps = T::from_f64_lossy(cfg.eps);
        for e in &mut self.entries {
            let g = e.grad.as_ref().unwrap();
            let it = e
                .value
                .data_mut()
                .iter_mut()
                .zip(e.m.data_mut().iter_mut())
                .zip(e.v.data_mut().iter_mut())
                .zip(g.data());
            for (((p, m), v), &gv) in it {
                *m = b1 * *m + (T::one() - b1) * gv;
                *v = b2 * *v + (T::one() - b2) * gv * gv;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Copy with values converted to another precision; optimizer state is reset.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            out.add(e.name.clone(), e.value.cast()).expect("names are unique");
        }
        out
    }

    /// Copies values for every matching name from `other`.
    pub fn load_values_from<U: Real>(&mut self, other: &ParamStore<U>) -> Result<()> {
        for e in &mut self.entries {
            let id = other
                .id(&e.name)
                .ok_or_else(|| Error::arg(format!("checkpoint lacks parameter `{}`", e.name)))?;
            let src = other.value(id);
            if src.shape() != e.value.shape() {
                return Err(Error::shape(format!(
                    "parameter `{}`: checkpoint shape {:?}, model shape {:?}",
                    e.name,
                    src.shape(),
                    e.value.shape()
                )));
            }
            e.value = src.cast();
        }
        Ok(())
    }

    pub fn encode_wts1(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WTS1_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.value.rank() as u32).to_le_bytes());
            for &d in e.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in e.value.data() {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode_wts1(buf: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            if pos + n > buf.len() {
                return Err(Error::format(
                    pos as u64,
                    format!("truncated while reading {what}"),
                ));
            }
            let s = &buf[pos..pos + n];
            pos += n;
            Ok(s)
        };
        if take(4, "magic")? != WTS1_MAGIC {
            return Err(Error::format(0, "bad magic, expected WTS1"));
        }
        let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
        let count = u32_of(take(4, "count")?);
        let mut store = ParamStore::new();
        for _ in 0..count {
            let nlen = u32_of(take(4, "name length")?);
            let name = String::from_utf8(take(nlen, "name")?.to_vec())
                .map_err(|e| Error::format(0, format!("parameter name not UTF-8: {e}")))?;
            let rank = u32_of(take(4, "rank")?);
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32_of(take(4, "extent")?));
            }
            let n: usize = shape.iter().product();
            let data: Vec<T> = take(n * 4, "payload")?
                .chunks_exact(4)
                .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect();
            store.add(name, Tensor::new(&shape, data)?)?;
        }
        if pos != buf.len() {
            return Err(Error::format(pos as u64, "trailing bytes after last parameter"));
        }
        Ok(store)
    }

    pub fn save_wts1(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode_wts1()).map_err(|e| Error::io(path, e))
    }

    pub fn load_wts1(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_wts1(&buf)
    }
}

#[cfg(test)]
impl ParamStore<f64> {
    pub(crate) fn grad_set_for_test(&mut self, id: ParamId, g: f64) {
        self.entries[id.0].grad = Some(Tensor::scalar(g));
    }
}
