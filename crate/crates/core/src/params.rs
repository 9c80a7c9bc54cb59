//! Named parameter registry shared by the networks, optimizer, and checkpoints.

use crate::element::Element;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`]; stable for the lifetime of
/// the store, and the ordering key for checkpoints and optimizer state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Position in store registration order; indexes gradient slices.
    pub fn index(&self) -> usize {
        self.0
    }
}

pub struct Param<E: Element> {
    pub name: String,
    pub value: Tensor<E>,
}

/// Insertion-ordered set of named tensors.
pub struct ParamStore<E: Element = f32> {
    entries: Vec<Param<E>>,
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, mut value: Tensor<E>) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        value.set_requires_grad(true);
        self.entries.push(Param { name, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<E> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.entries[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<E>> {
        self.entries.iter()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Registers the parameter value on a tape. `trainable` controls whether
    /// this pass accumulates a gradient for it.
    pub fn leaf(&self, tape: &mut Tape<E>, id: ParamId, trainable: bool) -> Var {
        let mut v = self.entries[id.0].value.clone();
        v.set_requires_grad(trainable);
        tape.leaf(v)
    }
}
