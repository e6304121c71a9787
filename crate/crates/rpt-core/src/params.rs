//! Named parameter registry. Registration order is the canonical order used
//! for gradient reduction, optimizer state, and checkpoint layout.

use alloc::string::String;
use alloc::vec::Vec;

use crate::elem::Elem;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) u32);

impl ParamId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<E: Elem> {
    pub name: String,
    pub value: Tensor<E>,
    /// Learning-rate multiplier of the entry's parameter group (1.0 for the
    /// base group, 50.0 for regional prior banks).
    pub lr_mult: f64,
}

#[derive(Clone, Debug)]
pub struct ParamSet<E: Elem> {
    entries: Vec<ParamEntry<E>>,
}

impl<E: Elem> Default for ParamSet<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn add(&mut self, name: String, value: Tensor<E>, lr_mult: f64) -> ParamId {
        let id = ParamId(self.entries.len() as u32);
        self.entries.push(ParamEntry { name, value, lr_mult });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry<E> {
        &self.entries[id.index()]
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(|i| ParamId(i as u32))
    }

    pub fn value(&self, id: ParamId) -> &Tensor<E> {
        &self.entries[id.index()].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<E>) {
        self.entries[id.index()].value = value;
    }

    pub fn entries(&self) -> &[ParamEntry<E>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<E>] {
        &mut self.entries
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}

/// ParamId -> tape Var map for one recorded forward pass.
pub struct Binding {
    vars: Vec<Option<Var>>,
}

impl Binding {
    /// Insert every parameter as a tape leaf. With `requires_grad`, the leafs
    /// become gradient targets for `backward`.
    pub fn bind_all<E: Elem>(tape: &mut Tape<E>, params: &ParamSet<E>, requires_grad: bool) -> Binding {
        let vars = params
            .entries()
            .iter()
            .map(|e| Some(tape.leaf(e.value.clone(), requires_grad)))
            .collect();
        Binding { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()].expect("parameter not bound")
    }

    /// Collect per-parameter gradients in registration order (None where a
    /// parameter received no gradient).
    pub fn take_grads<E: Elem>(&self, tape: &mut Tape<E>) -> Vec<Option<Tensor<E>>> {
        self.vars
            .iter()
            .map(|v| v.and_then(|var| tape.take_grad(var)))
            .collect()
    }
}
