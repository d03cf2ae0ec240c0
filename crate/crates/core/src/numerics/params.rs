use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Named, ordered collection of trainable tensors owned by one model component.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    entries: Vec<ParamEntry>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.clone(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
        }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for e in &mut self.entries {
            e.trainable = trainable;
        }
    }

    /// Replace values by name. Every stored parameter must be present with its shape.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        if named.len() != self.entries.len() {
            return Err(Error::Corrupt(format!(
                "expected {} parameters, found {}",
                self.entries.len(),
                named.len()
            )));
        }
        for entry in &mut self.entries {
            let (_, t) = named
                .iter()
                .find(|(n, _)| *n == entry.name)
                .ok_or_else(|| Error::Corrupt(format!("missing parameter `{}`", entry.name)))?;
            if t.shape() != entry.value.shape() {
                return Err(Error::shape("load_named", entry.value.shape(), t.shape()));
            }
            entry.value = t.clone();
        }
        Ok(())
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect()
    }
}

/// Uniform Xavier/Glorot initialization.
pub fn xavier_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

pub fn normal_init<R: Rng>(rng: &mut R, shape: &[usize], std: f32) -> Tensor {
    // Box-Muller keeps the draw sequence independent of distribution crates.
    Tensor::from_fn(shape, |_| {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32 * std
    })
}
