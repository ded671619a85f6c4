use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

/// Named learnable tensors in a fixed insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Element> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Replace every value from `(name, tensor)` pairs, checking names and shapes.
    pub fn assign(&mut self, items: &[(String, Tensor<T>)]) -> Result<()> {
        for (name, t) in items {
            let slot = self
                .get_mut(name)
                .ok_or_else(|| Error::Format(format!("unknown parameter `{name}`")))?;
            if slot.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, stored {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t.clone();
        }
        for name in &self.names {
            if !items.iter().any(|(n, _)| n == name) {
                return Err(Error::Format(format!("missing parameter `{name}`")));
            }
        }
        Ok(())
    }

    /// Place every parameter on `g` as a gradient-tracked leaf.
    pub fn bind<'g>(&self, g: &'g Graph<T>) -> BoundParams<'g, '_, T> {
        let vars = self.iter().map(|(n, t)| g.param(n, t.clone())).collect();
        BoundParams { store: self, vars }
    }

    /// Place every parameter on `g` as a constant.
    pub fn bind_frozen<'g>(&self, g: &'g Graph<T>) -> BoundParams<'g, '_, T> {
        let vars = self.values.iter().map(|t| g.constant(t.clone())).collect();
        BoundParams { store: self, vars }
    }

    /// Use caller-created variables, one per parameter in store order.
    pub fn bind_vars<'g>(&self, vars: Vec<Var<'g, T>>) -> Result<BoundParams<'g, '_, T>> {
        if vars.len() != self.len() {
            return Err(Error::Contract(format!(
                "{} variables for {} parameters",
                vars.len(),
                self.len()
            )));
        }
        Ok(BoundParams { store: self, vars })
    }
}

pub struct BoundParams<'g, 's, T: Element> {
    store: &'s ParamStore<T>,
    vars: Vec<Var<'g, T>>,
}

impl<'g, T: Element> BoundParams<'g, '_, T> {
    pub fn var(&self, name: &str) -> Var<'g, T> {
        match self.store.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("parameter `{name}` not registered"),
        }
    }

    pub fn vars(&self) -> &[Var<'g, T>] {
        &self.vars
    }
}
