//! Named parameter storage addressed by canonical dotted paths.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use super::array::DenseArray;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub path: String,
    pub value: DenseArray,
    pub grad: DenseArray,
    pub velocity: DenseArray,
    pub trainable: bool,
    /// Receives weight decay during the optimizer step.
    pub decay: bool,
}

#[derive(Clone, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal draw truncated at two standard deviations.
    TruncNormal { std: f64 },
    Value(DenseArray),
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub trainable: bool,
    pub decay: bool,
}

impl ParamSpec {
    pub fn new(path: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            path: path.into(),
            shape: shape.to_vec(),
            init,
            trainable: true,
            decay: false,
        }
    }

    pub fn decayed(mut self) -> Self {
        self.decay = true;
        self
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }
}

pub fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Ordered parameter store. Ids follow canonical (lexicographic path) order when
/// the store is built with [`ParamStore::from_specs`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Materializes `specs` in canonical path order, drawing random initial
    /// values from `rng` in that same order.
    pub fn from_specs<R: Rng + ?Sized>(mut specs: Vec<ParamSpec>, rng: &mut R) -> Result<Self> {
        specs.sort_by(|a, b| a.path.cmp(&b.path));
        let mut store = Self::new();
        for spec in specs {
            let value = match spec.init {
                Init::Zeros => DenseArray::zeros(&spec.shape),
                Init::Ones => DenseArray::filled(&spec.shape, 1.0),
                Init::TruncNormal { std } => {
                    let n = spec.shape.iter().product();
                    let data = (0..n).map(|_| trunc_normal(rng, std)).collect();
                    DenseArray::from_vec(&spec.shape, data)?
                }
                Init::Value(v) => {
                    if v.shape() != spec.shape.as_slice() {
                        return Err(Error::shape(
                            "param init",
                            format!("`{}` declared {:?} but value is {:?}", spec.path, spec.shape, v.shape()),
                        ));
                    }
                    v
                }
            };
            store.insert(spec.path, value, spec.trainable, spec.decay)?;
        }
        Ok(store)
    }

    pub fn insert(
        &mut self,
        path: impl Into<String>,
        value: DenseArray,
        trainable: bool,
        decay: bool,
    ) -> Result<ParamId> {
        let path = path.into();
        if self.index.contains_key(&path) {
            return Err(Error::Config(format!("duplicate parameter path `{path}`")));
        }
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            grad: DenseArray::zeros(value.shape()),
            velocity: DenseArray::zeros(value.shape()),
            path: path.clone(),
            value,
            trainable,
            decay,
        });
        self.index.insert(path, id);
        Ok(id)
    }

    /// Replaces an entry's value (shape may change); gradient and velocity are reset.
    pub fn replace(&mut self, id: ParamId, value: DenseArray) {
        let e = &mut self.entries[id.0];
        e.grad = DenseArray::zeros(value.shape());
        e.velocity = DenseArray::zeros(value.shape());
        e.value = value;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, path: &str) -> Option<ParamId> {
        self.index.get(path).copied()
    }

    pub fn require(&self, path: &str) -> Result<ParamId> {
        self.id(path)
            .ok_or_else(|| Error::Config(format!("unknown parameter path `{path}`")))
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &DenseArray {
        &self.entries[id.0].value
    }

    pub fn by_path(&self, path: &str) -> Option<&ParamEntry> {
        self.id(path).map(|id| self.entry(id))
    }

    pub fn by_path_mut(&mut self, path: &str) -> Option<&mut ParamEntry> {
        self.id(path).map(|id| &mut self.entries[id.0])
    }

    /// Entries in canonical path order.
    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.index.values().map(|id| &self.entries[id.0])
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    pub(crate) fn canonical_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.index.values().copied()
    }

    /// Sets the trainable flag of every entry whose path starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for e in self.entries.iter_mut().filter(|e| e.path.starts_with(prefix)) {
            e.trainable = trainable;
        }
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.grad.fill(0.0));
    }

    pub fn reset_velocities(&mut self) {
        self.entries.iter_mut().for_each(|e| e.velocity.fill(0.0));
    }

    /// Zeroed gradient buffers aligned with this store's ids.
    pub fn new_grads(&self) -> Grads {
        Grads {
            tensors: self
                .entries
                .iter()
                .map(|e| DenseArray::zeros(e.value.shape()))
                .collect(),
        }
    }

    /// Adds `grads` into every entry's gradient buffer.
    pub fn accumulate(&mut self, grads: &Grads) {
        for (e, g) in self.entries.iter_mut().zip(&grads.tensors) {
            e.grad.add_assign(g);
        }
    }

    pub fn round_to_f32(&mut self) {
        for e in &mut self.entries {
            e.value.round_to_f32();
            e.velocity.round_to_f32();
        }
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }
}

/// Gradient buffers for one store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Grads {
    tensors: Vec<DenseArray>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &DenseArray {
        &self.tensors[id.0]
    }

    pub fn slot(&mut self, id: ParamId) -> &mut [f64] {
        self.tensors[id.0].data_mut()
    }

    /// Two disjoint slots at once (weight and bias of one layer).
    pub fn pair(&mut self, a: ParamId, b: ParamId) -> (&mut [f64], &mut [f64]) {
        assert_ne!(a, b);
        if a.0 < b.0 {
            let (lo, hi) = self.tensors.split_at_mut(b.0);
            (lo[a.0].data_mut(), hi[0].data_mut())
        } else {
            let (lo, hi) = self.tensors.split_at_mut(a.0);
            (hi[0].data_mut(), lo[b.0].data_mut())
        }
    }

    pub fn add(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.tensors.iter_mut().for_each(|t| t.scale(factor));
    }
}
