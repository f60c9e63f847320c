use std::cell::RefCell;
use std::collections::BTreeSet;

use super::Tensor;

/// Handle to a parameter owned by a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, learnable tensors in registration order.
///
/// Reads through [`ParamStore::get`] can be recorded with
/// [`ParamStore::start_audit`], which lets tests prove a code path never
/// touches a given parameter group.
#[derive(Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    audit: RefCell<Option<BTreeSet<usize>>>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.clone(),
            audit: RefCell::new(None),
        }
    }
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map()
            .entries(
                self.names
                    .iter()
                    .zip(self.tensors.iter().map(Tensor::shape)),
            )
            .finish()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        if let Some(log) = self.audit.borrow_mut().as_mut() {
            log.insert(id.0);
        }
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
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

    /// Total number of scalar entries across all parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn start_audit(&self) {
        *self.audit.borrow_mut() = Some(BTreeSet::new());
    }

    /// Stops recording and returns the names of every parameter read since
    /// [`start_audit`](Self::start_audit).
    pub fn finish_audit(&self) -> Vec<String> {
        self.audit
            .borrow_mut()
            .take()
            .unwrap_or_default()
            .into_iter()
            .map(|i| self.names[i].clone())
            .collect()
    }
}
