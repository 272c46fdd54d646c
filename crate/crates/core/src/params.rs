use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

/// How a named tensor participates in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// A model parameter excluded from the optimizer (e.g. a frozen ψ).
    Frozen,
    /// Running statistics; not counted as a parameter.
    Buffer,
}

impl ParamKind {
    pub fn tag(self) -> &'static str {
        match self {
            ParamKind::Trainable => "param",
            ParamKind::Frozen => "frozen",
            ParamKind::Buffer => "buffer",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "param" => Some(ParamKind::Trainable),
            "frozen" => Some(ParamKind::Frozen),
            "buffer" => Some(ParamKind::Buffer),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub value: Tensor,
    pub grad: Tensor,
    pub kind: ParamKind,
}

/// Named parameters with gradient accumulators of identical shape.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) {
        let grad = Tensor::zeros(value.shape());
        self.entries.insert(name.into(), ParamEntry { value, grad, kind });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::Graph(format!("missing parameter {name}")))
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Replaces a value, keeping kind; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Graph(format!("missing parameter {name}")))?;
        if e.value.shape() != value.shape() {
            return Err(Error::dim(
                "param set",
                format!("{name}: shape {:?} -> {:?}", e.value.shape(), value.shape()),
            ));
        }
        e.value = value;
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<ParamEntry> {
        self.entries.remove(name)
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Graph(format!("missing parameter {name}")))?;
        if e.grad.shape() != grad.shape() {
            return Err(Error::dim(
                "gradient",
                format!("{name}: {:?} vs {:?}", e.grad.shape(), grad.shape()),
            ));
        }
        e.grad.data_mut().iter_mut().zip(grad.data()).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().fill(0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of scalar model parameters (trainable and frozen, buffers excluded).
    pub fn count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.kind != ParamKind::Buffer)
            .map(|e| e.value.len())
            .sum()
    }

    /// Values only; gradients and kinds compared separately.
    pub fn same_values(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, ea), (b, eb))| a == b && ea.value == eb.value && ea.kind == eb.kind)
    }
}
