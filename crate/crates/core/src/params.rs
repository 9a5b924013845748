//! Named, ordered collection of trainable arrays with matching gradient
//! slots; the unit of checkpointing and optimization.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::DenseArray;

/// One trainable (or frozen) array plus its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub value: DenseArray<F>,
    pub grad: DenseArray<F>,
    pub trainable: bool,
}

/// Insertion-ordered map from parameter name to [`Param`].
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    entries: IndexMap<String, Param<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    /// Registers a new parameter; names must be unique.
    pub fn insert(&mut self, name: &str, value: DenseArray<F>, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "parameter '{name}' already exists"
            )));
        }
        let grad = DenseArray::zeros(value.shape());
        self.entries.insert(
            name.to_string(),
            Param {
                value,
                grad,
                trainable,
            },
        );
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param<F>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<F>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter '{name}'")))
    }

    pub fn value(&self, name: &str) -> Result<&DenseArray<F>> {
        Ok(&self.get(name)?.value)
    }

    /// Adds `grad` into the named parameter's gradient slot (shape-checked).
    pub fn accumulate_grad(&mut self, name: &str, grad: &DenseArray<F>) -> Result<()> {
        let param = self.get_mut(name)?;
        if param.value.shape() != grad.shape() {
            return Err(Error::Shape(format!(
                "gradient for '{name}' has shape {:?}, value has {:?}",
                grad.shape(),
                param.value.shape()
            )));
        }
        param.grad.axpy(F::one(), grad)
    }

    pub fn zero_grads(&mut self) {
        for param in self.entries.values_mut() {
            param.grad.fill(F::zero());
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Iteration follows insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<F>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    /// Marks every parameter whose name starts with `prefix` as frozen.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (name, param) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                param.trainable = false;
            }
        }
    }

    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, param) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                param.trainable = trainable;
            }
        }
    }

    /// Copies every entry of `src` into this store as new parameters.
    pub fn adopt_all(&mut self, src: &ParamStore<F>, trainable: bool) -> Result<()> {
        for (name, param) in src.iter() {
            self.insert(name, param.value.clone(), trainable)?;
        }
        Ok(())
    }

    /// Overwrites values of already-registered parameters from `src` by name.
    /// Every `src` entry must exist here with an identical shape.
    pub fn load_values_from(&mut self, src: &ParamStore<F>) -> Result<()> {
        for (name, incoming) in src.iter() {
            let param = self.entries.get_mut(name).ok_or_else(|| {
                Error::InvalidArgument(format!("parameter '{name}' not expected by this model"))
            })?;
            if param.value.shape() != incoming.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter '{name}' has shape {:?} on disk but {:?} in the model",
                    incoming.value.shape(),
                    param.value.shape()
                )));
            }
            param.value = incoming.value.clone();
        }
        Ok(())
    }

    /// Total number of scalar values across all parameters.
    pub fn total_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Total number of scalar values across trainable parameters.
    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Bit-exact equality of parameter values (names, order, shapes, data).
    pub fn values_equal(&self, other: &ParamStore<F>) -> bool {
        self.len() == other.len()
            && self.iter().zip(other.iter()).all(|((an, ap), (bn, bp))| {
                an == bn
                    && ap.value.shape() == bp.value.shape()
                    && ap.value.data() == bp.value.data()
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_ordered() {
        let mut store = ParamStore::<f64>::new();
        store.insert("b.w", DenseArray::zeros(&[2]), true).unwrap();
        store.insert("a.w", DenseArray::zeros(&[3]), true).unwrap();
        assert!(store.insert("a.w", DenseArray::zeros(&[3]), true).is_err());
        let names: Vec<_> = store.names().collect();
        assert_eq!(names, ["b.w", "a.w"]);
    }

    #[test]
    fn accumulate_grad_checks_shape() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", DenseArray::zeros(&[2, 2]), true).unwrap();
        let bad = DenseArray::zeros(&[2, 3]);
        assert!(store.accumulate_grad("w", &bad).is_err());
        let good = DenseArray::filled(&[2, 2], 1.5);
        store.accumulate_grad("w", &good).unwrap();
        store.accumulate_grad("w", &good).unwrap();
        assert_eq!(store.get("w").unwrap().grad.data(), &[3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn freeze_prefix_only_touches_matches() {
        let mut store = ParamStore::<f64>::new();
        store
            .insert("teacher.conv0.weight", DenseArray::zeros(&[1]), true)
            .unwrap();
        store
            .insert("student.mlp0.weight", DenseArray::zeros(&[1]), true)
            .unwrap();
        store.freeze_prefix("teacher");
        assert!(!store.get("teacher.conv0.weight").unwrap().trainable);
        assert!(store.get("student.mlp0.weight").unwrap().trainable);
    }

    #[test]
    fn load_values_reports_mismatched_width() {
        let mut model = ParamStore::<f64>::new();
        model.insert("head.weight", DenseArray::zeros(&[4, 2]), true).unwrap();
        let mut disk = ParamStore::<f64>::new();
        disk.insert("head.weight", DenseArray::zeros(&[8, 2]), true).unwrap();
        let err = model.load_values_from(&disk).unwrap_err();
        assert!(err.to_string().contains("head.weight"), "{err}");
    }
}
