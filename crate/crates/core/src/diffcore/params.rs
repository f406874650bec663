use indexmap::IndexMap;

use super::{DiffError, Grads, Graph, Tensor, Var};

/// Named learnable tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), DiffError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(DiffError::DuplicateParam(name));
        }
        value.dims()?;
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, DiffError> {
        self.params
            .get(name)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    /// Replace the values of a parameter; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<(), DiffError> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "set_param",
                left: slot.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub(crate) fn values_mut(&mut self, name: &str) -> Result<&mut [f64], DiffError> {
        self.params
            .get_mut(name)
            .map(Tensor::data_mut)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Record every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Result<Bindings, DiffError> {
        let mut vars = IndexMap::with_capacity(self.params.len());
        for (name, value) in &self.params {
            vars.insert(name.clone(), g.leaf(value.clone())?);
        }
        Ok(Bindings { vars })
    }
}

/// Map from parameter name to its leaf on one graph.
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: IndexMap<String, Var>,
}

impl Bindings {
    pub fn var(&self, name: &str) -> Result<Var, DiffError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Collect per-parameter adjoints. A bound leaf the loss never reached
    /// has a true gradient of zero and is reported as such.
    pub fn gradients(&self, grads: &mut Grads, store: &ParamStore) -> Result<IndexMap<String, Tensor>, DiffError> {
        let mut out = IndexMap::with_capacity(self.vars.len());
        for (name, &var) in &self.vars {
            let value = store.get(name)?;
            let g = grads
                .take(var)
                .unwrap_or_else(|| Tensor::zeros(value.rows(), value.cols()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}
