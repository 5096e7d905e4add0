use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::DiffError;

/// Handle of one named array inside a [`ParameterSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

/// Named parameter arrays with matching gradient buffers, iterated in
/// insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    entries: Vec<ParamEntry>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], value: Vec<f64>) -> Result<ParamId, DiffError> {
        let numel: usize = shape.iter().product();
        if numel != value.len() {
            return Err(DiffError::Shape {
                op: "parameter",
                expected: numel,
                found: value.len(),
            });
        }
        if self.find(name).is_some() {
            return Err(DiffError::Structural(alloc::format!("duplicate parameter `{name}`")));
        }
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            grad: vec![0.0; value.len()],
            value,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn get(&self, id: ParamId) -> Option<&ParamEntry> {
        self.entries.get(id.0)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub(crate) fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].grad
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.value.iter().copied()).collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.grad.iter().copied()).collect()
    }

    /// Mutable access to the scalar at flat position `index`.
    pub fn flat_value_mut(&mut self, mut index: usize) -> Option<&mut f64> {
        for e in &mut self.entries {
            if index < e.value.len() {
                return e.value.get_mut(index);
            }
            index -= e.value.len();
        }
        None
    }

    /// Adds `other`'s gradients into this set in declaration order.
    pub fn accumulate_grads(&mut self, other: &ParameterSet) -> Result<(), DiffError> {
        if other.entries.len() != self.entries.len() {
            return Err(DiffError::Structural("parameter sets differ in length".into()));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if a.shape != b.shape {
                return Err(DiffError::Structural(alloc::format!("shape mismatch for `{}`", a.name)));
            }
            for (g, h) in a.grad.iter_mut().zip(&b.grad) {
                *g += h;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_order() {
        let mut p = ParameterSet::new();
        let a = p.add("a", &[2, 2], vec![1.0; 4]).unwrap();
        let b = p.add("b", &[3], vec![2.0; 3]).unwrap();
        assert_eq!(p.entry(a).grad.len(), 4);
        assert_eq!(p.entry(b).grad.len(), 3);
        let names: Vec<_> = p.entries().iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ["a", "b"]);
        assert!(p.add("a", &[1], vec![0.0]).is_err());
        assert!(p.add("c", &[2], vec![0.0]).is_err());
        *p.flat_value_mut(5).unwrap() = 9.0;
        assert_eq!(p.value(b)[1], 9.0);
    }
}
