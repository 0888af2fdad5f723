use std::collections::BTreeMap;

use super::Tensor;

/// Handle to a parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Ids of every parameter whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.iter()
            .filter(move |(_, n, _)| n.starts_with(prefix))
            .map(|(id, _, _)| id)
    }
}

/// Per-parameter gradients produced by a backward pass. Parameters that did
/// not influence the root hold `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub(crate) grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn empty(num_params: usize) -> Self {
        Self {
            grads: vec![None; num_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// True if no gradient reached `id`, or every entry is exactly zero.
    pub fn is_zero(&self, id: ParamId) -> bool {
        self.get(id).is_none_or(|g| g.iter().all(|&x| x == 0.0))
    }

    /// `self += scale * other`, entry by entry.
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(src) = src {
                let dst = dst.get_or_insert_with(|| vec![0.0; src.len()]);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += scale * s;
                }
            }
        }
    }
}
