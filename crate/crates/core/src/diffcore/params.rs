use super::{DiffError, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Tensor,
}

/// Named parameter tensors with gradient slots.
///
/// Iteration follows insertion order, so two stores built by the same
/// construction sequence enumerate identically.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId, DiffError> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(DiffError::DuplicateParam(name));
        }
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: "param" });
        }
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.entries.push(Entry { name, value, grad });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].grad
    }

    /// Replaces a value, keeping the shape fixed.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<(), DiffError> {
        let current = &self.entries[id.0].value;
        if current.shape() != value.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "set_value",
                lhs: current.shape(),
                rhs: value.shape(),
            });
        }
        self.entries[id.0].value = value;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(0.0);
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }

    /// Copies every gradient out, in store order.
    pub fn grads_snapshot(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.grad.clone()).collect()
    }

    pub fn values_snapshot(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    /// Restores values captured by [`values_snapshot`](Self::values_snapshot).
    pub fn restore_values(&mut self, values: &[Tensor]) {
        assert_eq!(values.len(), self.entries.len(), "snapshot size mismatch");
        for (e, v) in self.entries.iter_mut().zip(values) {
            e.value = v.clone();
        }
    }
}
