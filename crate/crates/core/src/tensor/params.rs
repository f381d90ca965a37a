use std::collections::HashMap;

use super::{Gradients, Graph, Scalar, Tensor};

/// Handle to a named tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors: trainable weights plus
/// non-trainable buffers such as batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    /// Registers a tensor. Panics on duplicate names, which are a programming error.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id.0);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(trainable));
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.tensors[id.0].requires_grad).collect()
    }

    /// Number of trainable scalars.
    pub fn trainable_len(&self) -> usize {
        self.tensors.iter().filter(|t| t.requires_grad).map(|t| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            if t.requires_grad {
                t.grad = Some(vec![T::zero(); t.numel()]);
            } else {
                t.grad = None;
            }
        }
    }

    /// Adds the gradients computed on `graph` into each bound parameter's
    /// `grad` buffer.
    pub fn accumulate(&mut self, graph: &Graph<T>, grads: &Gradients<T>) {
        for (id, var) in graph.bindings() {
            let t = &mut self.tensors[id.0];
            if !t.requires_grad {
                continue;
            }
            if let Some(g) = grads.get(var) {
                let n = t.numel();
                let buf = t.grad.get_or_insert_with(|| vec![T::zero(); n]);
                for (b, &v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
        }
    }

    /// L2 norm over all trainable gradients (missing gradients count as zero).
    pub fn grad_norm(&self) -> T {
        let mut acc = T::zero();
        for t in &self.tensors {
            if let (true, Some(g)) = (t.requires_grad, t.grad.as_ref()) {
                for &v in g {
                    acc += v * v;
                }
            }
        }
        acc.sqrt()
    }
}
