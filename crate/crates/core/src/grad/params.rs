use sha2::{Digest, Sha256};

use super::{GradError, Gradients, Graph, NodeId, Scalar, Tensor};

/// Ordered, named collection of weight tensors.
///
/// Networks address their parameters by position; names exist for
/// serialization and error messages.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<S>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.tensors.iter_mut().for_each(|t| t.set_requires_grad(on));
    }

    /// Records every parameter as a leaf of `g`, in order.
    pub fn bind(&self, g: &mut Graph<S>) -> Vec<NodeId> {
        self.tensors.iter().map(|t| g.leaf(t)).collect()
    }

    /// Records every parameter as a constant, regardless of trainability.
    pub fn bind_frozen(&self, g: &mut Graph<S>) -> Vec<NodeId> {
        self.tensors.iter().map(|t| g.constant(t)).collect()
    }

    /// Moves gradients for `ids` (as returned by [`bind`](Self::bind)) into
    /// the tensors, accumulating onto any gradient already present.
    pub fn absorb_grads(&mut self, grads: &mut Gradients<S>, ids: &[NodeId]) -> Result<(), GradError> {
        for (t, &id) in self.tensors.iter_mut().zip(ids) {
            if let Some(g) = grads.take(id) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    /// SHA-256 over names, shapes and little-endian element bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_f64_lossy().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
