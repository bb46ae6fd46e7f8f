//! Named trainable (or frozen) parameters.

use std::collections::BTreeMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub grad: Option<Tensor>,
    pub frozen: bool,
    /// Excluded from decoupled weight decay (biases, loss weights).
    pub no_decay: bool,
}

/// Owns every parameter of a model; iteration order is registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            grad: None,
            frozen: false,
            no_decay: false,
        });
        id
    }

    /// He-normal initialised weight; `fan_in` sets the scale.
    pub fn add_he<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        self.add(name, Tensor::randn(shape, std, rng))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        let id = self.add(name, Tensor::zeros(shape));
        self.params[id.0].no_decay = true;
        id
    }

    pub fn freeze(&mut self, id: ParamId) {
        self.params[id.0].frozen = true;
        self.params[id.0].grad = None;
    }

    pub fn set_no_decay(&mut self, id: ParamId) {
        self.params[id.0].no_decay = true;
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect()
    }

    /// Adds `grad` into the parameter's gradient buffer unless it is frozen.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f32]) {
        let p = &mut self.params[id.0];
        if p.frozen {
            return;
        }
        let shape = p.tensor.shape().to_vec();
        let buf = p.grad.get_or_insert_with(|| Tensor::zeros(&shape));
        for (g, &d) in buf.data_mut().iter_mut().zip(grad) {
            *g += d;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// SHA-256 over names and raw bits of the selected parameters.
    pub fn hash_where(&self, pred: impl Fn(&Parameter) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| pred(p)) {
            h.update(p.name.as_bytes());
            h.update(p.tensor.to_atsr_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn frozen_hash(&self) -> String {
        self.hash_where(|p| p.frozen)
    }

    /// Replaces a parameter's value, keeping shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.tensor.shape() != value.shape() {
            return Err(Error::Incompatible(format!(
                "parameter {} expects shape {:?}, got {:?}",
                p.name,
                p.tensor.shape(),
                value.shape()
            )));
        }
        p.tensor = value;
        Ok(())
    }
}
