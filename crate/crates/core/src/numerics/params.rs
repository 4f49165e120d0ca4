use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidInput(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        let mut t = Tensor::zeros(shape);
        t.data_mut().fill(1.0);
        self.insert(name, t)
    }

    /// Normal initialization with the given standard deviation.
    pub fn normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let normal = Normal::new(0.0, std)
            .map_err(|e| Error::InvalidInput(format!("bad init std {std}: {e}")))?;
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = normal.sample(rng);
        }
        self.insert(name, t)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Copies values from `other`, requiring identical names and shapes.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.len(),
                other.len()
            )));
        }
        for (i, name) in self.names.iter().enumerate() {
            let src = other.by_name(name).ok_or_else(|| {
                Error::Checkpoint(format!("parameter {name} missing from checkpoint"))
            })?;
            if src.shape() != self.tensors[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?} in checkpoint, {:?} expected",
                    src.shape(),
                    self.tensors[i].shape()
                )));
            }
        }
        for (i, name) in self.names.iter().enumerate() {
            self.tensors[i] = other.by_name(name).cloned().unwrap_or_else(|| unreachable!());
        }
        Ok(())
    }
}

/// Initializer for [`ParamBuilder::param`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// Registers parameters into an empty store, or binds to the parameters of
/// an existing one (checking names and shapes), through one code path.
pub struct ParamBuilder<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: Option<&'a mut R>,
    bound: usize,
}

impl<'a, R: Rng> ParamBuilder<'a, R> {
    pub fn create(store: &'a mut ParamStore, rng: &'a mut R) -> Self {
        ParamBuilder {
            store,
            rng: Some(rng),
            bound: 0,
        }
    }

    pub fn bind(store: &'a mut ParamStore) -> Self {
        ParamBuilder {
            store,
            rng: None,
            bound: 0,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        self.bound += 1;
        match self.rng.as_deref_mut() {
            Some(rng) => match init {
                Init::Normal(std) => self.store.normal(name, shape, std, rng),
                Init::Zeros => self.store.zeros(name, shape),
                Init::Ones => self.store.ones(name, shape),
            },
            None => {
                let id = self
                    .store
                    .id(name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
                let got = self.store.get(id).shape();
                if got != shape {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {got:?}, expected {shape:?}"
                    )));
                }
                Ok(id)
            }
        }
    }

    /// Fails if the store holds parameters that were never requested.
    pub fn finish(self) -> Result<()> {
        if self.bound != self.store.len() {
            let extra = self.store.len().saturating_sub(self.bound);
            return Err(Error::Checkpoint(format!(
                "{extra} parameters not used by this configuration"
            )));
        }
        Ok(())
    }
}
