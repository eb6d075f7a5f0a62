//! Minimal reverse-mode differentiation engine over dense f32 tensors, plus
//! the optimizers the training loops need.
//!
//! Everything downstream (rendering, inversion, embedding, the patch
//! training loop) is expressed through [`Graph`] so a single backward sweep
//! yields exact gradients. 32-bit floats throughout; single-threaded graph
//! execution.

mod graph;
mod optim;
mod tensor;

pub use graph::{Graph, NodeId};
pub use optim::{cosine_anneal_lr, AdamState};
pub use tensor::Tensor;

/// Named parameter list: the unit the optimizer updates and the checkpoint
/// format serializes. Order is fixed at construction and significant.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.push((name.into(), value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.entries.iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t).collect()
    }

    /// Register every tensor as a trainable leaf of `graph`, in order.
    pub fn register(&self, graph: &mut Graph) -> Vec<NodeId> {
        self.entries
            .iter()
            .map(|(_, t)| graph.param(t.clone()))
            .collect()
    }

    /// Register every tensor as a constant leaf (frozen parameters).
    pub fn register_frozen(&self, graph: &mut Graph) -> Vec<NodeId> {
        self.entries
            .iter()
            .map(|(_, t)| graph.leaf(t.clone()))
            .collect()
    }

    /// FNV-1a over the raw little-endian bytes; used by tests to assert a
    /// stage did not touch frozen parameters.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for (name, t) in &self.entries {
            for b in name.as_bytes() {
                eat(*b);
            }
            for v in t.data() {
                for b in v.to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }
}
