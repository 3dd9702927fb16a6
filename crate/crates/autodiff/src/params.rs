use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), t)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.tensors.values().filter(|t| t.requires_grad).map(Tensor::numel).sum()
    }

    /// Marks every tensor whose name satisfies `pred` as trainable and the
    /// rest as frozen.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, t) in &mut self.tensors {
            t.requires_grad = pred(name);
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Records every tensor on `tape`, returning the handles by name.
    pub fn record(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        self.tensors.iter().map(|(n, t)| (n.clone(), tape.leaf(t))).collect()
    }

    /// Accumulates adjoints of recorded leaves into `grad` fields.
    pub fn accumulate_grads(&mut self, vars: &BTreeMap<String, Var>, grads: &Gradients) {
        for (name, t) in &mut self.tensors {
            if let Some(&v) = vars.get(name) {
                if t.requires_grad {
                    grads.accumulate_into(v, t);
                }
            }
        }
    }
}

impl FromIterator<(String, Tensor)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}
