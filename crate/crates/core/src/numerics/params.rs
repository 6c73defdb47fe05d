use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    /// Shared with any tape that binds it; copied on write.
    value: Arc<Tensor2>,
    grad: Tensor2,
    has_grad: bool,
    frozen: bool,
}

/// Named, ordered collection of learnable tensors and their gradient buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor2) -> ParamId {
        let (r, c) = value.shape();
        self.entries.push(Entry {
            name: name.into(),
            value: Arc::new(value),
            grad: Tensor2::zeros(r, c),
            has_grad: false,
            frozen: false,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Gaussian init with standard deviation `1/sqrt(fan_in)`.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let std = 1.0 / (fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let value = Tensor2::from_fn(rows, cols, |_, _| normal.sample(rng));
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor2 {
        &self.entries[id.0].value
    }

    /// Mutable access to a value; refused once the parameter is frozen.
    pub fn value_mut(&mut self, id: ParamId) -> Result<&mut Tensor2> {
        let e = &mut self.entries[id.0];
        if e.frozen {
            return Err(Error::Contract(format!("parameter {} is frozen", e.name)));
        }
        Ok(Arc::make_mut(&mut e.value))
    }

    pub(crate) fn shared_value(&self, id: ParamId) -> Arc<Tensor2> {
        Arc::clone(&self.entries[id.0].value)
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor2> {
        let e = &self.entries[id.0];
        e.has_grad.then_some(&e.grad)
    }

    pub fn has_any_grad(&self) -> bool {
        self.entries.iter().any(|e| e.has_grad)
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor2) {
        let e = &mut self.entries[id.0];
        if e.frozen {
            return;
        }
        e.grad.add_assign(g);
        e.has_grad = true;
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
            e.has_grad = false;
        }
    }

    pub fn scale_grads(&mut self, s: f64) {
        for e in self.entries.iter_mut().filter(|e| e.has_grad) {
            e.grad.scale_in_place(s);
        }
    }

    pub fn freeze_all(&mut self) {
        self.entries.iter_mut().for_each(|e| e.frozen = true);
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn all_frozen(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.frozen)
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub(crate) fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Tensor2, &mut Tensor2, bool) {
        let e = &mut self.entries[id.0];
        (Arc::make_mut(&mut e.value), &mut e.grad, e.has_grad)
    }

    /// `(name, value)` pairs in registration order.
    pub fn named_values(&self) -> impl Iterator<Item = (&str, &Tensor2)> {
        self.entries.iter().map(|e| (e.name.as_str(), &*e.value))
    }

    /// Overwrites values from `(name, value)` records; every parameter must be
    /// present with a matching shape.
    pub fn load_named<'a>(&mut self, mut lookup: impl FnMut(&str) -> Option<&'a Tensor2>) -> Result<()> {
        for e in &mut self.entries {
            let v = lookup(&e.name)
                .ok_or_else(|| Error::Validation(format!("checkpoint is missing parameter {}", e.name)))?;
            if !v.same_shape(&e.value) {
                return Err(Error::shape(
                    "load_named",
                    format!("{}: stored {:?}, expected {:?}", e.name, v.shape(), e.value.shape()),
                ));
            }
            e.value = Arc::new(v.clone());
        }
        Ok(())
    }

    /// Bitwise comparison of all values.
    pub fn values_identical(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a
                        .value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
